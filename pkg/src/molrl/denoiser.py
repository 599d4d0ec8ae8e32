"""Equivariant noise predictor and its training machinery.

A message-passing network over the fully connected atom graph predicts the
forward-process noise (coordinate part and feature part) from a latent
state. Coordinates enter only through pairwise differences and squared
distances, so the coordinate output rotates/reflects with the input while
the feature output stays invariant. Includes the simplified noise-matching
pretraining objective, reverse-mode gradients, an Adam optimizer and a
binary checkpoint format.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import NumericError, ShapeError
from .molgraph import AtomVocabulary

DEFAULT_LAYERS = 3
DEFAULT_HIDDEN = 64

# bound on the per-edge coordinate gate; without it a partially trained
# network feeds its own coordinate updates back through the squared
# distances and the sampling chain overflows
COORD_RANGE = 15.0

def _pair_concat(h: Tensor, d2: Tensor) -> Tensor:
    """(B, m, f) node features to (B, m, m, 2f+1) pair features [h_i, h_j, d2]."""
    b, m, f = h.data.shape
    out = np.empty((b, m, m, 2 * f + 1))
    out[:, :, :, :f] = h.data[:, :, None, :]
    out[:, :, :, f:2 * f] = h.data[:, None, :, :]
    out[:, :, :, 2 * f:] = d2.data
    return Tensor(out, (
        (h, lambda g: g[:, :, :, :f].sum(axis=2) + g[:, :, :, f:2 * f].sum(axis=1)),
        (d2, lambda g: g[:, :, :, 2 * f:]),
    ))


def _pair_diff(x: Tensor) -> Tensor:
    """(B, m, 3) coordinates to (B, m, m, 3) pairwise differences x_i - x_j."""
    out = x.data[:, :, None, :] - x.data[:, None, :, :]
    return Tensor(out, ((x, lambda g: g.sum(axis=2) - g.sum(axis=1)),))


class GraphBatch:
    """Latent states padded to a common atom count, with masks.

    Padded coordinate/feature rows are zero; the pair mask kills both the
    diagonal and any pair touching a padded slot, so padded atoms never
    influence real ones.
    """

    def __init__(self, states, params: "DenoiserParams"):
        b = len(states)
        m = max(s.n_atoms for s in states)
        self.sizes = [s.n_atoms for s in states]
        self.z_x = np.zeros((b, m, 3))
        self.z_h = np.zeros((b, m, params.vocab_size))
        self.feat = np.zeros((b, m, params.d_in))
        self.node_mask = np.zeros((b, m, 1))
        v = params.vocab_size
        for k, s in enumerate(states):
            n = s.n_atoms
            if s.z_h.shape[1] != v:
                raise ShapeError(f"feature width {s.z_h.shape[1]} != vocab size {v}")
            if s.condition.size != params.cond_dim:
                raise ShapeError(
                    f"condition width {s.condition.size} != expected {params.cond_dim}")
            self.z_x[k, :n] = s.z_x - s.z_x.mean(axis=0, keepdims=True)
            self.z_h[k, :n] = s.z_h
            self.feat[k, :n, :v] = s.z_h
            self.feat[k, :n, v] = s.t_norm
            self.feat[k, :n, v + 1:] = s.condition
            self.node_mask[k, :n] = 1.0
        eye = np.eye(m, dtype=bool)[None, :, :, None]
        self.pair_mask = (self.node_mask[:, :, None, :]
                          * self.node_mask[:, None, :, :]) * ~eye
        self.counts = np.array(self.sizes, dtype=np.float64)[:, None, None]


@dataclass
class LatentState:
    """Noisy latents at one timestep.

    ``z_x`` is expected in the zero-CoG subspace (producers guarantee it;
    ``predict_noise`` re-projects defensively), ``z_h`` is the diffusible
    feature block (one-hot width), and ``t_norm`` = t / T.
    """

    z_x: np.ndarray
    z_h: np.ndarray
    t: int
    t_norm: float
    condition: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.condition = np.asarray(self.condition, dtype=np.float64).reshape(-1)
        if not (np.all(np.isfinite(self.z_x)) and np.all(np.isfinite(self.z_h))):
            raise NumericError("latent state contains non-finite values")

    @property
    def n_atoms(self) -> int:
        return self.z_x.shape[0]


class DenoiserParams:
    """Weight store for the message-passing denoiser.

    Tensor names: ``embed.{w,b}``, ``out.{w,b}`` and, per layer ``l``,
    ``l{l}.{edge0,edge1,coord0,coord1,node0,node1}.{w,b}``.
    """

    def __init__(self, vocab: AtomVocabulary, cond_dim: int, layers: int = DEFAULT_LAYERS,
                 hidden: int = DEFAULT_HIDDEN, tensors: dict | None = None):
        self.vocab = vocab
        self.cond_dim = cond_dim
        self.layers = layers
        self.hidden = hidden
        self.tensors = tensors if tensors is not None else {}

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    @property
    def d_in(self) -> int:
        # one-hot block + time scalar + condition vector
        return self.vocab_size + 1 + self.cond_dim

    @classmethod
    def init(cls, vocab: AtomVocabulary, cond_dim: int, rng, layers: int = DEFAULT_LAYERS,
             hidden: int = DEFAULT_HIDDEN) -> "DenoiserParams":
        p = cls(vocab, cond_dim, layers, hidden)
        h = hidden

        def mat(name, fan_in, fan_out, zero=False):
            if zero:
                p.tensors[name + ".w"] = np.zeros((fan_in, fan_out))
            else:
                bound = 1.0 / np.sqrt(fan_in)
                p.tensors[name + ".w"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            p.tensors[name + ".b"] = np.zeros(fan_out)

        mat("embed", p.d_in, h)
        for l in range(layers):
            mat(f"l{l}.edge0", 2 * h + 1, h)
            mat(f"l{l}.edge1", h, h)
            mat(f"l{l}.coord0", h, h)
            # final coordinate layer starts at zero so the fresh model
            # predicts zero coordinate noise
            mat(f"l{l}.coord1", h, 1, zero=True)
            mat(f"l{l}.node0", 2 * h, h)
            mat(f"l{l}.node1", h, h)
        mat("out", h, p.vocab_size)
        return p

    def copy(self) -> "DenoiserParams":
        return DenoiserParams(self.vocab, self.cond_dim, self.layers, self.hidden,
                              {k: v.copy() for k, v in self.tensors.items()})

    def architecture(self) -> dict:
        return {"cond_dim": self.cond_dim, "layers": self.layers, "hidden": self.hidden}


GradientBundle = dict  # tensor name -> gradient array


def wrap_params(params: DenoiserParams) -> dict:
    return {k: Tensor(v, name=k) for k, v in params.tensors.items()}


def _linear(x: Tensor, pt: dict, name: str) -> Tensor:
    return ad.affine(x, pt[name + ".w"], pt[name + ".b"])


def _forward_batch(pt: dict, params: DenoiserParams, gb: GraphBatch):
    """Message-passing forward pass on a padded batch; returns (eps_x, eps_h).

    Pairwise quantities live on dense (B, m, m, .) arrays; the pair mask
    keeps the layers free of scatter/gather indexing.
    """
    mask = gb.pair_mask
    h = _linear(Tensor(gb.feat), pt, "embed").silu()
    z_x = Tensor(gb.z_x)
    x = z_x
    for l in range(params.layers):
        diff = _pair_diff(x)
        d2 = (diff * diff).sum(axis=3, keepdims=True)
        msg = _linear(_pair_concat(h, d2), pt, f"l{l}.edge0").silu()
        msg = _linear(msg, pt, f"l{l}.edge1").silu()
        gate = _linear(_linear(msg, pt, f"l{l}.coord0").silu(), pt, f"l{l}.coord1")
        w = gate.tanh() * COORD_RANGE
        dist = (d2 + 1e-12).sqrt()  # epsilon guards coincident points
        x = x + (diff * (w / (dist + 1.0) * mask)).sum(axis=2)
        agg = (msg * mask).sum(axis=2)
        upd = _linear(ad.concat([h, agg]), pt, f"l{l}.node0").silu()
        h = h + _linear(upd, pt, f"l{l}.node1")
    eps_x = x - z_x
    # project to zero CoG over the real atoms of each graph
    eps_x = eps_x - (eps_x * gb.node_mask).sum(axis=1, keepdims=True) / gb.counts
    eps_h = _linear(h, pt, "out")
    return eps_x, eps_h


def predict_noise(params: DenoiserParams, state: LatentState):
    """Plain-array forward pass: (eps_x M x 3 zero-CoG, eps_h M x d_h)."""
    gb = GraphBatch([state], params)
    with ad.no_grad():
        eps_x, eps_h = _forward_batch(wrap_params(params), params, gb)
    return eps_x.data[0], eps_h.data[0]


def predict_noise_batch(params: DenoiserParams, states):
    """Batched plain-array forward; returns a list of (eps_x, eps_h) pairs."""
    gb = GraphBatch(states, params)
    with ad.no_grad():
        eps_x, eps_h = _forward_batch(wrap_params(params), params, gb)
    return [(eps_x.data[k, :n], eps_h.data[k, :n]) for k, n in enumerate(gb.sizes)]


def pretrain_loss_t(pt: dict, params: DenoiserParams, batch, schedule, rng) -> Tensor:
    """Taped noise-matching loss over a batch of molecular configurations.

    Per molecule: t ~ U(1..T), eps ~ N(0, I) with the coordinate block
    CoG-projected, z_t = alpha_t [x, h] + sigma_t eps, contribution =
    per-component mean of (eps - prediction)^2; batch mean over molecules.
    """
    from .diffusion import forward_noise  # local import avoids a module cycle

    states = []
    for config in batch:
        t = int(rng.integers(1, schedule.T + 1))
        state, (eps_x, eps_h) = forward_noise(config, t, schedule, rng, params.vocab)
        states.append((state, eps_x, eps_h))
    gb = GraphBatch([s for s, _, _ in states], params)
    b, m = gb.z_x.shape[:2]
    target_x = np.zeros((b, m, 3))
    target_h = np.zeros((b, m, params.vocab_size))
    for k, (_, eps_x, eps_h) in enumerate(states):
        target_x[k, :eps_x.shape[0]] = eps_x
        target_h[k, :eps_h.shape[0]] = eps_h
    px, ph = _forward_batch(pt, params, gb)
    # per-molecule mean over noise components, then batch mean
    weights = 1.0 / (gb.counts * (3 + params.vocab_size) * len(batch))
    dx = (px - target_x) * gb.node_mask
    dh = (ph - target_h) * gb.node_mask
    sq = ((dx * dx).sum(axis=2, keepdims=True) * weights).sum() \
        + ((dh * dh).sum(axis=2, keepdims=True) * weights).sum()
    return sq


def pretrain_loss(params: DenoiserParams, batch, schedule, rng) -> float:
    if not batch:
        raise ShapeError("pretrain batch must be nonempty")
    with ad.no_grad():
        loss = pretrain_loss_t(wrap_params(params), params, batch, schedule, rng)
    return float(loss.data)


def _collect_grads(pt: dict) -> GradientBundle:
    grads = {}
    for name, tensor in pt.items():
        g = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        grads[name] = np.asarray(g)
    return grads


def grad(params: DenoiserParams, closure) -> GradientBundle:
    """Reverse-mode gradients of ``closure(param_tensors) -> scalar Tensor``."""
    return value_and_grad(params, closure)[1]


def value_and_grad(params: DenoiserParams, closure):
    pt = wrap_params(params)
    loss = closure(pt)
    if not np.isfinite(loss.data):
        raise NumericError("loss is non-finite before backward")
    loss.backward()
    return float(loss.data), _collect_grads(pt)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

class AdamState:
    def __init__(self, params: DenoiserParams, beta1=0.9, beta2=0.999, eps=1e-8):
        self.step = 0
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.tensors.items()}


def adam_step(params: DenoiserParams, grads: GradientBundle, state: AdamState,
              lr: float) -> DenoiserParams:
    """Bias-corrected first/second-moment update, in place on ``params``."""
    if set(grads) != set(params.tensors):
        raise ShapeError("gradient bundle does not match parameter tensors")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, g in grads.items():
        if g.shape != params.tensors[name].shape:
            raise ShapeError(f"gradient shape mismatch for {name!r}")
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = state.m[name] / c1
        v_hat = state.v[name] / c2
        params.tensors[name] = params.tensors[name] - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params


# ---------------------------------------------------------------------------
# Checkpoints: magic, u64-LE header length, JSON header, float64-LE payloads
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"MOLRLCKPT1\n"


def optimizer_tensors(state: AdamState) -> dict:
    out = {"adam.step": np.array(float(state.step))}
    for name, arr in state.m.items():
        out[f"adam.m.{name}"] = arr
    for name, arr in state.v.items():
        out[f"adam.v.{name}"] = arr
    return out


def restore_optimizer(params: DenoiserParams, opt: dict) -> AdamState:
    state = AdamState(params)
    if not opt:
        return state
    state.step = int(opt["adam.step"])
    for name in params.tensors:
        state.m[name] = opt[f"adam.m.{name}"].copy()
        state.v[name] = opt[f"adam.v.{name}"].copy()
    return state


def save_checkpoint(path, params: DenoiserParams, schedule_T: int, schedule_s: float,
                    training_step: int = 0, extra: dict | None = None,
                    opt_tensors: dict | None = None):
    names = sorted(params.tensors)
    opt_names = sorted(opt_tensors) if opt_tensors else []
    header = {
        "format_version": 1,
        "architecture": params.architecture(),
        "vocabulary": params.vocab.to_dict(),
        "schedule": {"T": schedule_T, "s": schedule_s},
        "training_step": training_step,
        "tensors": [{"name": n, "shape": list(params.tensors[n].shape)} for n in names],
        "opt_tensors": [{"name": n, "shape": list(np.shape(opt_tensors[n]))}
                        for n in opt_names],
    }
    if extra:
        header["extra"] = extra
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(params.tensors[n], dtype="<f8").tobytes())
        for n in opt_names:
            fh.write(np.ascontiguousarray(opt_tensors[n], dtype="<f8").tobytes())


def _read_tensors(fh, specs):
    tensors = {}
    for spec in specs:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        buf = fh.read(8 * count)
        tensors[spec["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    return tensors


def load_checkpoint(path):
    """Returns (params, header, optimizer tensor dict)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ShapeError(f"{path}: not a checkpoint file")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        arch = header["architecture"]
        tensors = _read_tensors(fh, header["tensors"])
        opt = _read_tensors(fh, header.get("opt_tensors", []))
    vocab = AtomVocabulary.from_dict(header["vocabulary"])
    params = DenoiserParams(vocab, arch["cond_dim"], arch["layers"], arch["hidden"], tensors)
    return params, header, opt
