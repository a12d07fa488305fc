"""Shared-parameter policy/value networks and their exact gradients.

One parameter set per agent type: a tanh MLP trunk (64x64 by default) with a
policy head and a value head. The signal head is a Bernoulli logit over
{keep, switch}; the vehicle head is a Gaussian whose mean is tanh-squashed to
[-3, 3] m/s^2 with a learned state-independent log-std. Forward and backward
passes are written out by hand in numpy so the training step can be checked
against central finite differences parameter by parameter.
"""
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

ACTION_SCALE = 3.0
LOG_STD_INIT = float(np.log(0.5 * ACTION_SCALE))
LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class MlpParams:
    kind: str                  # "tl" | "cav"
    obs_dim: int
    hidden: tuple = (64, 64)
    weights: list = field(default_factory=list)   # trunk layer matrices
    biases: list = field(default_factory=list)
    w_policy: np.ndarray = None
    b_policy: np.ndarray = None
    w_value: np.ndarray = None
    b_value: np.ndarray = None
    log_std: np.ndarray = None  # cav only, shape (1,)

    def arrays(self):
        """Named parameter arrays in a fixed flattening order."""
        out = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out.append((f"w{i}", w))
            out.append((f"b{i}", b))
        out += [("w_policy", self.w_policy), ("b_policy", self.b_policy),
                ("w_value", self.w_value), ("b_value", self.b_value)]
        if self.log_std is not None:
            out.append(("log_std", self.log_std))
        return out

    def fingerprint(self):
        h = hashlib.sha256()
        for name, arr in self.arrays():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()[:16]


def init_params(kind, obs_dim, hidden=(64, 64), seed=0):
    if kind not in ("tl", "cav"):
        raise ValueError(f"unknown agent kind {kind!r}")
    rng = np.random.default_rng(
        np.random.SeedSequence((seed, 0 if kind == "tl" else 1)))
    params = MlpParams(kind, int(obs_dim), tuple(hidden))
    fan_in = obs_dim
    for width in hidden:
        scale = np.sqrt(1.0 / fan_in)
        params.weights.append(rng.normal(0.0, scale, size=(fan_in, width)))
        params.biases.append(np.zeros(width))
        fan_in = width
    scale = np.sqrt(1.0 / fan_in)
    # small policy head keeps the initial policy near uniform/zero-mean
    params.w_policy = rng.normal(0.0, scale, size=(fan_in, 1)) * 0.01
    params.b_policy = np.zeros(1)
    params.w_value = rng.normal(0.0, scale, size=(fan_in, 1))
    params.b_value = np.zeros(1)
    if kind == "cav":
        params.log_std = np.array([LOG_STD_INIT])
    return params


def forward(params, obs):
    """Batched forward pass; returns (head_pre, values, cache).

    head_pre is the raw policy-head output (logit for "tl", pre-squash mean
    for "cav"); cache holds the activations the backward pass needs.
    """
    x = np.atleast_2d(np.asarray(obs, dtype=np.float64))
    if x.shape[1] != params.obs_dim:
        raise ValueError(f"observation length {x.shape[1]} does not match "
                         f"network input {params.obs_dim}")
    hs = [x]
    for w, b in zip(params.weights, params.biases):
        hs.append(np.tanh(hs[-1] @ w + b))
    h = hs[-1]
    head_pre = (h @ params.w_policy + params.b_policy)[:, 0]
    values = (h @ params.w_value + params.b_value)[:, 0]
    return head_pre, values, hs


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _softplus(z):
    return np.logaddexp(0.0, z)


@dataclass(frozen=True)
class BernoulliAction:
    logit: float

    @property
    def p_switch(self):
        return float(_sigmoid(np.asarray(self.logit)))

    def sample(self, rng):
        return int(rng.random() < self.p_switch)

    def greedy(self):
        return int(self.logit > 0.0)

    def log_prob(self, action):
        z = np.asarray(self.logit, dtype=np.float64)
        return float(np.where(action, -_softplus(-z), -_softplus(z)))

    def entropy(self):
        z = np.asarray(self.logit, dtype=np.float64)
        s = _sigmoid(z)
        return float(s * _softplus(-z) + (1.0 - s) * _softplus(z))


@dataclass(frozen=True)
class GaussianAction:
    mean: float
    log_std: float

    def sample(self, rng):
        raw = self.mean + np.exp(self.log_std) * rng.standard_normal()
        return float(np.clip(raw, -ACTION_SCALE, ACTION_SCALE))

    def greedy(self):
        return float(self.mean)

    def log_prob(self, action):
        z = (action - self.mean) / np.exp(self.log_std)
        return float(-0.5 * z * z - self.log_std - 0.5 * LOG_2PI)

    def entropy(self):
        return float(0.5 + 0.5 * LOG_2PI + self.log_std)


def policy_forward(params, obs):
    """Distribution and value estimate for one observation."""
    head_pre, values, _ = forward(params, np.asarray(obs)[None, :])
    if params.kind == "tl":
        return BernoulliAction(float(head_pre[0])), float(values[0])
    mean = ACTION_SCALE * np.tanh(head_pre[0])
    return GaussianAction(float(mean), float(params.log_std[0])), float(values[0])


class Policy:
    """Callable wrapper binding params to the sample/greedy action API."""

    def __init__(self, params):
        self.params = params

    def act(self, obs, rng=None, sample=True):
        dist, value = policy_forward(self.params, obs)
        action = dist.sample(rng) if sample else dist.greedy()
        return action, dist.log_prob(action), value


def ppo_loss_and_grads(params, obs, actions, old_logp, advantages, returns,
                       clip_eps, value_coef, entropy_coef):
    """Clipped-surrogate loss with exact gradients for every parameter.

    Loss per sample: -min(rho*A, clip(rho, 1-eps, 1+eps)*A)
                     + value_coef * (v - R)^2 - entropy_coef * H,
    averaged over the batch; rho = exp(logp_new - logp_old).
    Returns (loss, grads keyed like params.arrays(), stats).
    """
    x = np.asarray(obs, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.float64)
    old_logp = np.asarray(old_logp, dtype=np.float64)
    adv = np.asarray(advantages, dtype=np.float64)
    ret = np.asarray(returns, dtype=np.float64)
    n = x.shape[0]

    head_pre, values, hs = forward(params, x)
    grads = {}

    if params.kind == "tl":
        z = head_pre
        sig = _sigmoid(z)
        logp = np.where(actions > 0.5, -_softplus(-z), -_softplus(z))
        dlogp_dpre = actions - sig
        entropy = sig * _softplus(-z) + (1.0 - sig) * _softplus(z)
        dent_dpre = -z * sig * (1.0 - sig)
    else:
        t = np.tanh(head_pre)
        mean = ACTION_SCALE * t
        std = np.exp(params.log_std[0])
        zscore = (actions - mean) / std
        logp = -0.5 * zscore ** 2 - params.log_std[0] - 0.5 * LOG_2PI
        dlogp_dmean = zscore / std
        dlogp_dpre = dlogp_dmean * ACTION_SCALE * (1.0 - t ** 2)
        dlogp_dlogstd = zscore ** 2 - 1.0
        entropy = np.full(n, 0.5 + 0.5 * LOG_2PI + params.log_std[0])

    ratio = np.exp(logp - old_logp)
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * adv
    pg_loss = -np.minimum(unclipped, clipped)
    v_err = values - ret
    loss = float(np.mean(pg_loss + value_coef * v_err ** 2
                         - entropy_coef * entropy))
    if not np.isfinite(loss):
        return loss, None, {"loss": loss}

    use_unclipped = unclipped <= clipped
    g_logp = np.where(use_unclipped, -adv * ratio, 0.0) / n
    g_value = 2.0 * value_coef * v_err / n

    if params.kind == "tl":
        g_pre = g_logp * dlogp_dpre + (-entropy_coef / n) * dent_dpre
    else:
        g_pre = g_logp * dlogp_dpre
        grads["log_std"] = np.array([
            float(np.sum(g_logp * dlogp_dlogstd) - entropy_coef)])

    h = hs[-1]
    gp = g_pre[:, None]
    gv = g_value[:, None]
    grads["w_policy"] = h.T @ gp
    grads["b_policy"] = gp.sum(axis=0)
    grads["w_value"] = h.T @ gv
    grads["b_value"] = gv.sum(axis=0)
    g_h = gp @ params.w_policy.T + gv @ params.w_value.T
    for i in range(len(params.weights) - 1, -1, -1):
        g_z = g_h * (1.0 - hs[i + 1] ** 2)
        grads[f"w{i}"] = hs[i].T @ g_z
        grads[f"b{i}"] = g_z.sum(axis=0)
        if i > 0:
            g_h = g_z @ params.weights[i].T

    stats = {
        "loss": loss,
        "policy_loss": float(np.mean(pg_loss)),
        "value_loss": float(np.mean(v_err ** 2)),
        "entropy": float(np.mean(entropy)),
        "mean_ratio": float(np.mean(ratio)),
        "clip_fraction": float(np.mean(~use_unclipped)),
    }
    return loss, grads, stats


class Adam:
    """Adaptive-moment optimizer over a named-array parameter set."""

    def __init__(self, params, lr=3e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(a) for name, a in params.arrays()}
        self.v = {name: np.zeros_like(a) for name, a in params.arrays()}

    def step(self, params, grads, max_grad_norm=None):
        if max_grad_norm is not None:
            total = np.sqrt(sum(float(np.sum(g ** 2)) for g in grads.values()))
            if total > max_grad_norm:
                scale = max_grad_norm / (total + 1e-12)
                grads = {k: g * scale for k, g in grads.items()}
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for name, arr in params.arrays():
            g = grads[name]
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g ** 2
            arr -= self.lr * (self.m[name] / b1c) / (np.sqrt(self.v[name] / b2c)
                                                     + self.eps)
        return params


def flatten_params(params):
    return np.concatenate([a.ravel() for _, a in params.arrays()])


def set_flat_params(params, flat):
    offset = 0
    for _, arr in params.arrays():
        n = arr.size
        arr[...] = np.asarray(flat[offset:offset + n]).reshape(arr.shape)
        offset += n
    if offset != flat.size:
        raise ValueError("flat vector length does not match parameter count")
    return params


def flatten_grads(params, grads):
    return np.concatenate([grads[name].ravel() for name, _ in params.arrays()])


def save_checkpoint(path, params, meta=None):
    """Versioned npz dump; reload reproduces identical forward outputs."""
    payload = {f"param_{name}": arr for name, arr in params.arrays()}
    header = {
        "format_version": 1,
        "kind": params.kind,
        "obs_dim": params.obs_dim,
        "hidden": list(params.hidden),
        "meta": meta or {},
    }
    payload["header_json"] = np.frombuffer(
        json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    np.savez(path, **payload)


def load_checkpoint(path):
    with np.load(path) as data:
        header = json.loads(bytes(data["header_json"].tobytes()).decode())
        if header.get("format_version") != 1:
            raise ValueError(f"unsupported checkpoint version in {path}")
        params = MlpParams(header["kind"], int(header["obs_dim"]),
                           tuple(header["hidden"]))
        i = 0
        while f"param_w{i}" in data:
            params.weights.append(data[f"param_w{i}"].copy())
            params.biases.append(data[f"param_b{i}"].copy())
            i += 1
        params.w_policy = data["param_w_policy"].copy()
        params.b_policy = data["param_b_policy"].copy()
        params.w_value = data["param_w_value"].copy()
        params.b_value = data["param_b_value"].copy()
        if "param_log_std" in data:
            params.log_std = data["param_log_std"].copy()
    return params, header["meta"]
