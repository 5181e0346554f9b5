"""Small deterministic trajectory predictor with hand-written gradients.

The model is a tanh MLP over target-relative agent coordinates plus a linear skip path
from the input to the head. The head emits per-step displacements that are accumulated
into future waypoints of the target agent. Inputs are whitened per agent role (target,
AV, other) with statistics fitted on the training set and stored with the parameters.

Besides parameter gradients the module provides the input gradient of the
gradient-alignment objective ``1 - cos(grad_params(L), adv_grad)``, obtained by
reverse-mode differentiation through the backward pass itself.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .scene import DrivingScene, Trajectory

logger = logging.getLogger(__name__)

VARIANT_WIDTHS = {"A": (64, 64), "B": (128, 32)}
N_ROLES = 3  # target, AV, other
DEGENERATE_NORM = 1e-10  # gradient norms below this count as zero (alignment undefined)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class PredictorConfig:
    max_agents: int = 8
    obs_len: int = 4
    pred_len: int = 12
    hidden_sizes: tuple[int, ...] = VARIANT_WIDTHS["A"]
    seed: int = 0
    variant: str = "A"
    coord_scale: float = 20.0
    output_scale: float = 1.0
    linear_skip: bool = True
    input_gain: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        if not self.hidden_sizes or min(self.hidden_sizes) < 1:
            raise ValueError("hidden_sizes must be a non-empty list of positive widths")
        if self.max_agents < 2:
            raise ValueError("max_agents must be >= 2")
        if self.variant not in VARIANT_WIDTHS:
            raise ValueError(f"unknown variant {self.variant!r}")

    @classmethod
    def for_variant(cls, variant: str, **kw) -> "PredictorConfig":
        return cls(hidden_sizes=VARIANT_WIDTHS[variant], variant=variant, **kw)

    @property
    def coord_dim(self) -> int:
        return self.max_agents * self.obs_len * 2

    @property
    def input_dim(self) -> int:
        return self.max_agents * self.obs_len * 3

    @property
    def output_dim(self) -> int:
        return self.pred_len * 2

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        dims = [self.input_dim, *self.hidden_sizes, self.output_dim]
        return [(dims[i + 1], dims[i]) for i in range(len(dims) - 1)]

    @property
    def num_params(self) -> int:
        n = sum(o * i + o for o, i in self.layer_shapes)
        return n + (self.output_dim * self.input_dim if self.linear_skip else 0)

    @property
    def roles(self) -> np.ndarray:
        return np.minimum(np.arange(self.max_agents), N_ROLES - 1)

    def to_dict(self) -> dict:
        return {
            "max_agents": self.max_agents,
            "obs_len": self.obs_len,
            "pred_len": self.pred_len,
            "hidden_sizes": list(self.hidden_sizes),
            "seed": self.seed,
            "variant": self.variant,
            "coord_scale": self.coord_scale,
            "output_scale": self.output_scale,
            "linear_skip": self.linear_skip,
            "input_gain": self.input_gain,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PredictorConfig":
        return cls(**{**d, "hidden_sizes": tuple(d["hidden_sizes"])})


# ---------------------------------------------------------------------------
# Input whitening


def gap_fill_matrix(present: np.ndarray) -> np.ndarray:
    """(T, T) linear map filling absent steps from present ones.

    Interior gaps are interpolated linearly; leading or trailing gaps are extrapolated
    from the two nearest present steps (held constant if only one is present).
    """
    present = np.asarray(present) > 0
    t_len = len(present)
    F = np.zeros((t_len, t_len))
    idx = np.flatnonzero(present)
    for t in range(t_len):
        if present[t]:
            F[t, t] = 1.0
            continue
        if len(idx) == 0:
            continue
        before, after = idx[idx < t], idx[idx > t]
        if len(before) and len(after):
            i, j = before[-1], after[0]
        elif len(idx) == 1:
            F[t, idx[0]] = 1.0
            continue
        elif len(before):
            i, j = before[-2], before[-1]
        else:
            i, j = after[0], after[1]
        w = (t - i) / (j - i)
        F[t, i] += 1.0 - w
        F[t, j] += w
    return F


def _partial(mask: np.ndarray) -> np.ndarray:
    m = mask > 0
    return m.any(axis=-1) & ~m.all(axis=-1)


def fill_gaps(coords: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Apply ``gap_fill_matrix`` to every partially observed (..., A, T, 2) slot."""
    partial = _partial(mask)
    if not partial.any():
        return coords
    out = np.array(coords, dtype=np.float64)
    for ix in zip(*np.nonzero(partial)):
        out[ix] = gap_fill_matrix(mask[ix]) @ out[ix]
    return out


@dataclass(frozen=True, eq=False)
class InputNorm:
    """Per-role affine map of a slot's flattened (T*2) scaled coordinates.

    Slot features are ``mask * (M[role] @ (fill(x) - mean[role]))`` so absent steps stay
    zero. ``fill`` linearly interpolates absent steps of partially observed slots from
    the present ones, which keeps gaps from looking like violent manoeuvres.
    """

    mean: np.ndarray  # (N_ROLES, T*2)
    matrix: np.ndarray  # (N_ROLES, T*2, T*2)

    def __post_init__(self):
        for name in ("mean", "matrix"):
            arr = np.array(getattr(self, name), dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite input-norm {name}")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def identity(cls, config: PredictorConfig) -> "InputNorm":
        d = config.obs_len * 2
        return cls(np.zeros((N_ROLES, d)), np.broadcast_to(np.eye(d), (N_ROLES, d, d)))

    @classmethod
    def fit(cls, coords: np.ndarray, mask: np.ndarray, config: PredictorConfig,
            eps: float = 1e-4) -> "InputNorm":
        """ZCA whitening per role from fully present slots of (B, A, T, 2) coordinates.

        ``eps`` is added to every covariance eigenvalue; roles without samples keep the
        identity map.
        """
        ident = cls.identity(config)
        means, mats = ident.mean.copy(), ident.matrix.copy()
        d = config.obs_len * 2
        x = (coords / config.coord_scale).reshape(*coords.shape[:2], d)
        full = mask.all(axis=-1)
        for role in range(N_ROLES):
            sel = full[:, config.roles == role]
            rows = x[:, config.roles == role][sel]
            if len(rows) < 2:
                continue
            mu = rows.mean(axis=0)
            cov = np.cov(rows, rowvar=False, bias=True)
            lam, u = np.linalg.eigh(cov)
            means[role] = mu
            mats[role] = (u / np.sqrt(np.maximum(lam, 0.0) + eps)) @ u.T
        return cls(means, mats)

    def apply(self, coords: np.ndarray, mask: np.ndarray, config: PredictorConfig) -> np.ndarray:
        """(..., A, T, 2) coordinates and (..., A, T) mask to (..., D) model inputs."""
        roles = config.roles
        lead = coords.shape[:-3]
        coords = fill_gaps(coords, mask)
        x = (coords / config.coord_scale).reshape(*lead, config.max_agents, -1)
        z = np.einsum("aij,...aj->...ai", self.matrix[roles], x - self.mean[roles])
        z = z * np.repeat(mask, 2, axis=-1)
        return np.concatenate([z.reshape(*lead, -1), mask.reshape(*lead, -1)], axis=-1)

    def pullback(self, z_bar: np.ndarray, mask: np.ndarray, config: PredictorConfig) -> np.ndarray:
        """Chain an input-feature gradient (D,) back to (A, T, 2) scene coordinates."""
        roles = config.roles
        zc = z_bar[: config.coord_dim].reshape(config.max_agents, -1) * np.repeat(mask, 2, axis=-1)
        x_bar = np.einsum("aij,ai->aj", self.matrix[roles], zc) / config.coord_scale
        x_bar = x_bar.reshape(config.max_agents, config.obs_len, 2)
        for a in np.flatnonzero(_partial(mask)):
            x_bar[a] = gap_fill_matrix(mask[a]).T @ x_bar[a]
        return x_bar * mask[:, :, None]

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "matrix": self.matrix.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "InputNorm":
        return cls(np.asarray(d["mean"]), np.asarray(d["matrix"]))


# ---------------------------------------------------------------------------
# Parameters


class Net(NamedTuple):
    layers: list  # [(W (out, in), b (out,)), ...]
    skip: np.ndarray | None  # (output_dim, input_dim)


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Flat parameter vector plus the (non-trainable) input whitening.

    Layer ``l`` stores W (out, in) row-major, then b (out,); the skip matrix follows
    the last layer when enabled.
    """

    config: PredictorConfig
    theta: np.ndarray
    norm: InputNorm | None = None

    def __post_init__(self):
        theta = np.array(self.theta, dtype=np.float64)
        if theta.shape != (self.config.num_params,):
            raise ValueError(f"expected {self.config.num_params} params, got {theta.shape}")
        if not np.all(np.isfinite(theta)):
            raise ValueError("non-finite parameters")
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)
        if self.norm is None:
            object.__setattr__(self, "norm", InputNorm.identity(self.config))

    def net(self) -> Net:
        return unflatten(self.config, self.theta)

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return self.net().layers

    def with_theta(self, theta: np.ndarray) -> "ModelParams":
        return ModelParams(self.config, theta, self.norm)

    def features(self, tensor: "SceneTensor") -> np.ndarray:
        return self.norm.apply(tensor.coords, tensor.mask, self.config)

    def save(self, path) -> None:
        rec = {"config": self.config.to_dict(), "theta": self.theta.tolist(), "norm": self.norm.to_dict()}
        Path(path).write_text(json.dumps(rec))

    @classmethod
    def load(cls, path) -> "ModelParams":
        rec = json.loads(Path(path).read_text())
        cfg = PredictorConfig.from_dict(rec["config"])
        norm = InputNorm.from_dict(rec["norm"]) if "norm" in rec else None
        return cls(cfg, np.asarray(rec["theta"], dtype=np.float64), norm)


def unflatten(config: PredictorConfig, theta: np.ndarray) -> Net:
    layers, k = [], 0
    for o, i in config.layer_shapes:
        w = theta[k : k + o * i].reshape(o, i)
        k += o * i
        layers.append((w, theta[k : k + o]))
        k += o
    skip = theta[k:].reshape(config.output_dim, config.input_dim) if config.linear_skip else None
    return Net(layers, skip)


def flatten(net: Net) -> np.ndarray:
    parts = [np.concatenate([w.ravel(), b.ravel()]) for w, b in net.layers]
    if net.skip is not None:
        parts.append(net.skip.ravel())
    return np.concatenate(parts)


def init_params(config: PredictorConfig, norm: InputNorm | None = None) -> ModelParams:
    """LeCun-normal layers (first scaled by ``input_gain``, output by 0.1), zero biases and skip.

    A small first layer keeps the untrained network nearly blind to inputs that carry
    no signal, such as slot presence flags.
    """
    rng = np.random.default_rng(config.seed)
    layers = []
    shapes = config.layer_shapes
    for idx, (o, i) in enumerate(shapes):
        std = 1.0 / np.sqrt(i)
        if idx == 0:
            std *= config.input_gain
        if idx == len(shapes) - 1:
            std *= 0.1
        layers.append((rng.normal(0.0, std, size=(o, i)), np.zeros(o)))
    skip = np.zeros((config.output_dim, config.input_dim)) if config.linear_skip else None
    return ModelParams(config, flatten(Net(layers, skip)), norm)


# ---------------------------------------------------------------------------
# Scene encoding


@dataclass(frozen=True, eq=False)
class SceneTensor:
    """Target-relative observations, shape (max_agents, T, 2), with presence mask (max_agents, T).

    ``origin`` is the target's last observed position in scene coordinates and
    ``agent_ids`` lists the agent held by each occupied slot.
    """

    coords: np.ndarray
    mask: np.ndarray
    origin: np.ndarray
    agent_ids: tuple[str, ...]

    def __eq__(self, other) -> bool:
        if not isinstance(other, SceneTensor):
            return NotImplemented
        return (
            np.array_equal(self.coords, other.coords)
            and np.array_equal(self.mask, other.mask)
            and self.agent_ids == other.agent_ids
        )

    def slot(self, agent_id: str) -> int:
        return self.agent_ids.index(agent_id)

    def with_coords(self, agent_id: str, points: np.ndarray) -> "SceneTensor":
        """Copy with one agent's observation replaced by ``points`` (scene coordinates)."""
        k = self.slot(agent_id)
        coords = self.coords.copy()
        coords[k] = (np.asarray(points) - self.origin) * self.mask[k][:, None]
        return SceneTensor(coords, self.mask, self.origin, self.agent_ids)


def select_agents(scene: DrivingScene, max_agents: int) -> list[str]:
    """Canonical slot order: target, AV, then the remaining agents nearest-first to the AV.

    When there are too many agents, only those whose final observation lies nearest
    to the target's final observation are kept. Distance ties break by id.
    """
    origin = scene.target.obs.points[-1]
    others = [a for a in scene.agents if a.id not in (scene.target_id, scene.av_id)]
    if len(others) > max_agents - 2:
        dist = [float(np.linalg.norm(a.obs.points[-1] - origin)) for a in others]
        order = sorted(range(len(others)), key=lambda i: (dist[i], others[i].id))
        others = [others[i] for i in order[: max_agents - 2]]
    av_last = scene.av.obs.points[-1]
    others.sort(key=lambda a: (float(np.linalg.norm(a.obs.points[-1] - av_last)), a.id))
    return [scene.target_id, scene.av_id] + [a.id for a in others]


def encode_scene(scene: DrivingScene, config: PredictorConfig) -> SceneTensor:
    if scene.obs_len != config.obs_len:
        raise ValueError(f"scene T={scene.obs_len} but model expects {config.obs_len}")
    ids = select_agents(scene, config.max_agents)
    origin = scene.target.obs.points[-1].copy()
    coords = np.zeros((config.max_agents, config.obs_len, 2))
    mask = np.zeros((config.max_agents, config.obs_len))
    for k, aid in enumerate(ids):
        a = scene.agent(aid)
        m = np.asarray(a.presence, dtype=np.float64)
        coords[k] = (a.obs.points - origin) * m[:, None]
        mask[k] = m
    for arr in (coords, mask, origin):
        arr.setflags(write=False)
    return SceneTensor(coords, mask, origin, tuple(ids))


def relative_label(tensor: SceneTensor, label: Trajectory | np.ndarray) -> np.ndarray:
    pts = label.points if isinstance(label, Trajectory) else np.asarray(label)
    return (pts - tensor.origin).ravel()


# ---------------------------------------------------------------------------
# Forward / backward


def _accumulate(out: np.ndarray, scale: float) -> np.ndarray:
    """Map head output (..., 2*Δt) to cumulative waypoints (..., 2*Δt)."""
    shp = out.shape
    return (np.cumsum(out.reshape(*shp[:-1], -1, 2), axis=-2) * scale).reshape(shp)


def _accumulate_T(r: np.ndarray, scale: float) -> np.ndarray:
    shp = r.shape
    r2 = r.reshape(*shp[:-1], -1, 2)
    return (np.cumsum(r2[..., ::-1, :], axis=-2)[..., ::-1, :] * scale).reshape(shp)


def _forward(net: Net, z: np.ndarray):
    acts = [z]
    for w, b in net.layers[:-1]:
        acts.append(np.tanh(acts[-1] @ w.T + b))
    w, b = net.layers[-1]
    out = acts[-1] @ w.T + b
    if net.skip is not None:
        out = out + z @ net.skip.T
    return acts, out


class Prediction(NamedTuple):
    waypoints: np.ndarray  # (Δt, 2) relative to the target's last observed point
    latent: np.ndarray


def predict_vectors(params: ModelParams, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched forward pass: (B, D) features to (B, Δt, 2) relative waypoints and (B, H) latents."""
    cfg = params.config
    z = np.atleast_2d(z)
    if z.shape[-1] != cfg.input_dim:
        raise ValueError(f"input dim {z.shape[-1]} != {cfg.input_dim}")
    acts, out = _forward(params.net(), z)
    pred = _accumulate(out, cfg.output_scale)
    return pred.reshape(len(z), cfg.pred_len, 2), acts[-1]


def _check_tensor(params: ModelParams, tensor: SceneTensor) -> None:
    cfg = params.config
    if tensor.coords.shape != (cfg.max_agents, cfg.obs_len, 2):
        raise ValueError(f"tensor shape {tensor.coords.shape} does not match config")


def predict(params: ModelParams, tensor: SceneTensor) -> Prediction:
    _check_tensor(params, tensor)
    pred, latent = predict_vectors(params, params.features(tensor)[None])
    return Prediction(pred[0], latent[0])


def predict_absolute(params: ModelParams, tensor: SceneTensor) -> np.ndarray:
    return predict(params, tensor).waypoints + tensor.origin


def batch_loss(params: ModelParams, z: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-sample mean squared waypoint error for (B, D) features and (B, 2*Δt) relative labels."""
    _, out = _forward(params.net(), np.atleast_2d(z))
    r = _accumulate(out, params.config.output_scale) - np.atleast_2d(y)
    return np.mean(r**2, axis=-1)


def loss(params: ModelParams, tensor: SceneTensor, label: Trajectory | np.ndarray) -> float:
    """Mean over the Δt*2 scalar terms of the squared waypoint error."""
    _check_tensor(params, tensor)
    y = relative_label(tensor, label)
    return float(batch_loss(params, params.features(tensor)[None], y[None])[0])


def _backward(net: Net, acts, r: np.ndarray, scale: float, per_example: bool = False) -> Net:
    """Gradients of mean-over-batch (or per-example) MSE given forward activations."""
    bsz, m = r.shape
    d_out = _accumulate_T(r, scale) * (2.0 / m)
    if not per_example:
        d_out = d_out / bsz

    def outer(delta, a_in):
        if per_example:
            return delta[:, :, None] * a_in[:, None, :]
        return delta.T @ a_in

    grads = [None] * len(net.layers)
    delta = d_out
    for l in range(len(net.layers) - 1, -1, -1):
        w, _ = net.layers[l]
        grads[l] = (outer(delta, acts[l]), delta if per_example else delta.sum(axis=0))
        if l > 0:
            delta = (delta @ w) * (1.0 - acts[l] ** 2)
    skip = outer(d_out, acts[0]) if net.skip is not None else None
    return Net(grads, skip)


def batch_grad(params: ModelParams, z: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean loss and its parameter gradient over a batch."""
    net = params.net()
    acts, out = _forward(net, z)
    r = _accumulate(out, params.config.output_scale) - y
    grads = _backward(net, acts, r, params.config.output_scale)
    return float(np.mean(r**2)), flatten(grads)


def per_example_grads(params: ModelParams, z: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample losses (B,) and parameter gradients (B, P)."""
    net = params.net()
    acts, out = _forward(net, z)
    r = _accumulate(out, params.config.output_scale) - y
    grads = _backward(net, acts, r, params.config.output_scale, per_example=True)
    bsz = len(z)
    parts = [np.concatenate([gw.reshape(bsz, -1), gb], axis=1) for gw, gb in grads.layers]
    if grads.skip is not None:
        parts.append(grads.skip.reshape(bsz, -1))
    return np.mean(r**2, axis=1), np.concatenate(parts, axis=1)


def grad_params(params: ModelParams, tensor: SceneTensor, label: Trajectory | np.ndarray) -> np.ndarray:
    _check_tensor(params, tensor)
    z = params.features(tensor)[None]
    y = relative_label(tensor, label)[None]
    return batch_grad(params, z, y)[1]


def grad_loss_wrt_input(params: ModelParams, tensor: SceneTensor, label) -> tuple[float, np.ndarray]:
    """Loss and its gradient w.r.t. each slot's observation coordinates (masked steps zero)."""
    _check_tensor(params, tensor)
    cfg = params.config
    net = params.net()
    z = params.features(tensor)[None]
    y = relative_label(tensor, label)[None]
    acts, out = _forward(net, z)
    r = _accumulate(out, cfg.output_scale) - y
    d_out = _accumulate_T(r, cfg.output_scale) * (2.0 / r.shape[1])
    delta = d_out
    for l in range(len(net.layers) - 1, -1, -1):
        delta = delta @ net.layers[l][0]
        if l > 0:
            delta = delta * (1.0 - acts[l] ** 2)
    if net.skip is not None:
        delta = delta + d_out @ net.skip
    return float(np.mean(r**2)), params.norm.pullback(delta[0], tensor.mask, cfg)


# ---------------------------------------------------------------------------
# Alignment objective and its input gradient


class AlignmentGrad(NamedTuple):
    value: float
    grad: np.ndarray  # (max_agents, T, 2), derivative w.r.t. scene coordinates of each slot
    degenerate: bool


def alignment(train_grad: np.ndarray, adv_grad: np.ndarray) -> float:
    """``1 - cos`` between two gradient vectors; 1.0 if either is (numerically) zero."""
    ng, na = np.linalg.norm(train_grad), np.linalg.norm(adv_grad)
    if ng < DEGENERATE_NORM or na < DEGENERATE_NORM:
        return 1.0
    return float(1.0 - train_grad @ adv_grad / (ng * na))


def _input_grad_of_gradient_dot(net: Net, z: np.ndarray, y: np.ndarray, v: Net, scale: float):
    """Return (g, d/dz <v, g(z)>) where g(z) is the parameter gradient of the sample loss.

    Reverse-over-reverse: the backward pass producing g is replayed as a computation
    on its own and differentiated with respect to the forward activations.
    """
    layers = net.layers
    n_hidden = len(layers) - 1
    acts = [z]
    for w, b in layers[:-1]:
        acts.append(np.tanh(w @ acts[-1] + b))
    w_out, b_out = layers[-1]
    out = w_out @ acts[-1] + b_out
    if net.skip is not None:
        out = out + net.skip @ z
    m = len(out)
    r = _accumulate(out, scale) - y
    d_out = _accumulate_T(r, scale) * (2.0 / m)

    # backward pass: deltas[l] is dL/dpre of hidden layer l (1-based), pre-tanh
    deltas = [None] * (n_hidden + 1)
    e = [None] * (n_hidden + 1)
    upstream = d_out
    for l in range(n_hidden, 0, -1):
        w_next = layers[l][0]
        e[l] = w_next.T @ upstream
        deltas[l] = e[l] * (1.0 - acts[l] ** 2)
        upstream = deltas[l]
    grads = [(np.outer(deltas[l + 1], acts[l]), deltas[l + 1]) for l in range(n_hidden)]
    grads.append((np.outer(d_out, acts[n_hidden]), d_out))
    skip_grad = np.outer(d_out, z) if net.skip is not None else None

    # s = sum_l <V_l, delta_l a_{l-1}^T> + <vb_l, delta_l> (+ <V_skip, d_out z^T>)
    a_bar = [np.zeros_like(a) for a in acts]
    d_bar = [None] * (n_hidden + 1)
    for l in range(1, n_hidden + 1):
        vw, vb = v.layers[l - 1]
        d_bar[l] = vw @ acts[l - 1] + vb
        a_bar[l - 1] += vw.T @ deltas[l]
    vw, vb = v.layers[-1]
    d_out_bar = vw @ acts[n_hidden] + vb
    a_bar[n_hidden] += vw.T @ d_out
    if net.skip is not None:
        d_out_bar = d_out_bar + v.skip @ z
        a_bar[0] += v.skip.T @ d_out

    # reverse of the delta recursion, earliest-computed last
    for l in range(1, n_hidden + 1):
        gate = 1.0 - acts[l] ** 2
        e_bar = d_bar[l] * gate
        a_bar[l] += d_bar[l] * e[l] * (-2.0 * acts[l])
        w_next = layers[l][0]
        if l < n_hidden:
            d_bar[l + 1] = d_bar[l + 1] + w_next @ e_bar
        else:
            d_out_bar = d_out_bar + w_next @ e_bar
    out_bar = _accumulate_T(_accumulate(d_out_bar, scale), scale) * (2.0 / m)
    a_bar[n_hidden] += w_out.T @ out_bar
    if net.skip is not None:
        a_bar[0] += net.skip.T @ out_bar

    # reverse of the forward pass
    for l in range(n_hidden, 0, -1):
        pre_bar = a_bar[l] * (1.0 - acts[l] ** 2)
        a_bar[l - 1] += layers[l - 1][0].T @ pre_bar
    return flatten(Net(grads, skip_grad)), a_bar[0]


def grad_alignment_wrt_input(params: ModelParams, tensor: SceneTensor, clean_label,
                             adv_grad: np.ndarray) -> AlignmentGrad:
    """Alignment ``A = 1 - cos(grad_params(L), adv_grad)`` and dA/d(observation coordinates).

    The gradient is returned per slot of ``tensor`` in scene-coordinate units; masked
    steps get zero. A zero training gradient makes A undefined: the result is then
    ``(1.0, zeros, degenerate=True)``.
    """
    _check_tensor(params, tensor)
    cfg = params.config
    adv_grad = np.asarray(adv_grad, dtype=np.float64)
    if adv_grad.shape != (cfg.num_params,):
        raise ValueError("adv_grad must have the parameter-vector length")
    z = params.features(tensor)
    y = relative_label(tensor, clean_label)
    g = batch_grad(params, z[None], y[None])[1]
    ng, na = np.linalg.norm(g), np.linalg.norm(adv_grad)
    zeros = np.zeros_like(tensor.coords)
    if ng < DEGENERATE_NORM or na < DEGENERATE_NORM:
        return AlignmentGrad(1.0, zeros, True)
    dot = g @ adv_grad
    value = 1.0 - dot / (ng * na)
    # dA/dg = -(adv/|g| - (g.adv) g / |g|^3) / |adv|
    v = -(adv_grad / ng - dot * g / ng**3) / na
    _, z_bar = _input_grad_of_gradient_dot(params.net(), z, y, unflatten(cfg, v), cfg.output_scale)
    return AlignmentGrad(float(value), params.norm.pullback(z_bar, tensor.mask, cfg), False)


# ---------------------------------------------------------------------------
# Training


@dataclass(frozen=True)
class TrainHyper:
    lr: float = 0.005
    epochs: int = 100
    batch: int = 32
    seed: int = 0
    weight_decay: float = 0.0


@dataclass
class TrainResult:
    params: ModelParams
    losses: list[float] = field(default_factory=list)


def fit_input_norm(tensors: Sequence[SceneTensor], config: PredictorConfig) -> InputNorm:
    coords = np.stack([t.coords for t in tensors])
    mask = np.stack([t.mask for t in tensors])
    return InputNorm.fit(coords, mask, config)


def stack_dataset(dataset, params: ModelParams) -> tuple[np.ndarray, np.ndarray]:
    """(tensor, label) pairs to (N, D) model features and (N, 2*Δt) relative labels."""
    if len(dataset) == 0:
        raise ValueError("empty training set")
    coords = np.stack([t.coords for t, _ in dataset])
    mask = np.stack([t.mask for t, _ in dataset])
    z = params.norm.apply(coords, mask, params.config)
    y = np.stack([relative_label(t, lab) for t, lab in dataset])
    return z, y


def train(config: PredictorConfig, dataset, hyper: TrainHyper, init: ModelParams | None = None,
          grad_fn=None) -> TrainResult:
    """Mini-batch SGD from ``init``.

    ``dataset`` is either a list of (SceneTensor, label) pairs or a pre-stacked
    ``(Z, Y)`` tuple of model features. Without ``init`` the parameters are the seeded
    init of ``config`` with input whitening fitted on the pairs. The shuffle order comes
    from ``hyper.seed`` only. ``grad_fn`` replaces the batch gradient
    ``(params, z, y) -> (loss, grad)`` (robust training).
    """
    if isinstance(dataset, tuple):
        z_all, y_all = dataset
        params = init if init is not None else init_params(config)
    else:
        if len(dataset) == 0:
            raise ValueError("empty training set")
        params = init if init is not None else init_params(config, fit_input_norm([t for t, _ in dataset], config))
        z_all, y_all = stack_dataset(dataset, params)
    if len(z_all) == 0:
        raise ValueError("empty training set")
    theta = params.theta.copy()
    grad_fn = grad_fn or batch_grad
    rng = np.random.default_rng(hyper.seed)
    losses = []
    n = len(z_all)
    for epoch in range(hyper.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, hyper.batch):
            idx = order[start : start + hyper.batch]
            batch_l, g = grad_fn(params.with_theta(theta), z_all[idx], y_all[idx])
            if not np.isfinite(batch_l) or not np.all(np.isfinite(g)):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch starting {start}")
            theta = theta - hyper.lr * (g + hyper.weight_decay * theta)
            total += batch_l * len(idx)
        losses.append(total / n)
        if not np.all(np.isfinite(theta)):
            raise TrainingDiverged(f"non-finite parameters after epoch {epoch}")
        logger.debug("epoch %d loss %.5f", epoch, losses[-1])
    return TrainResult(params.with_theta(theta), losses)
