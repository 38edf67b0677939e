"""RiskNet: message passing on the SLA/component metagraph with a Student-t head.

Pure NumPy, float64, with a hand-written backward pass. Parameters live in
an ordered ``dict`` of arrays; every function is pure given its inputs and
an explicit random generator for dropout.

Layout of one message-passing round (weights shared across rounds)::

    m_c = sum over working edges  M_p,s->c(h_s, h_c) + sum over backup edges M_b,s->c(h_s, h_c)
    m_s = sum over working edges  M_p,c->s(h_c, h_s) + sum over backup edges M_b,c->s(h_c, h_s)
    h_c, h_s = GRU_c(h_c, m_c), GRU_s(h_s, m_s)

Each message map is affine in ``concat(h_sender, h_receiver)``. Because it is
affine, the per-edge sum is evaluated as sparse incidence products of
node-level projections, which is the same sum regrouped.
"""

import functools
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.special import expit, gammaln

from risknet.errors import DataError, NumericalError, ParameterError
from risknet.features import COMPONENT_COLUMNS, SLA_COLUMNS, NormStats
from risknet.rng import stream

SELU_LAMBDA = 1.0507009873554804934193349852946
SELU_ALPHA = 1.6732632423543772848170429916717
SCALE_FLOOR = 1e-6
CHECKPOINT_VERSION = "risknet-ckpt-1"

MESSAGE_MAPS = ("p_sc", "b_sc", "p_cs", "b_cs")


@dataclass(frozen=True)
class Hyper:
    hidden_dim: int = 32
    msg_dim: int = 64
    T: int = 6
    dropout_rates: tuple = (0.2, 0.1)
    l2_coeff: float = 0.01
    nu: float = 5.0
    readout_sizes: tuple = (64, 64, 32)

    def __post_init__(self):
        object.__setattr__(self, "dropout_rates", tuple(self.dropout_rates))
        object.__setattr__(self, "readout_sizes", tuple(self.readout_sizes))
        if self.T < 1:
            raise ParameterError("T must be >= 1")
        if min(self.hidden_dim, self.msg_dim, self.nu, *self.readout_sizes) <= 0:
            raise ParameterError("dimensions and nu must be positive")
        if self.hidden_dim < max(len(COMPONENT_COLUMNS), len(SLA_COLUMNS)):
            raise ParameterError("hidden_dim must hold the raw feature vectors")
        if self.l2_coeff < 0:
            raise ParameterError("l2_coeff must be >= 0")
        if not all(0 <= r < 1 for r in self.dropout_rates):
            raise ParameterError("dropout rates must be in [0, 1)")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, doc):
        return cls(**doc)


@dataclass
class Prediction:
    """Per-SLA location and scale of a Student-t with ``nu`` degrees of freedom."""

    mu: np.ndarray
    sigma: np.ndarray
    nu: float = 5.0
    cache: dict = field(default=None, repr=False, compare=False)


# --------------------------------------------------------------------------- params


def param_shapes(hyper):
    H, M = hyper.hidden_dim, hyper.msg_dim
    shapes = {}
    for name in MESSAGE_MAPS:
        shapes[f"msg_{name}_W"] = (2 * H, M)
        shapes[f"msg_{name}_b"] = (M,)
    for node in ("c", "s"):
        shapes[f"gru_{node}_W"] = (M, 3 * H)
        shapes[f"gru_{node}_U"] = (H, 3 * H)
        shapes[f"gru_{node}_b"] = (3 * H,)
    widths = (H, *hyper.readout_sizes, 2)
    for i, (fan_in, fan_out) in enumerate(zip(widths, widths[1:])):
        shapes[f"readout_{i}_W"] = (fan_in, fan_out)
        shapes[f"readout_{i}_b"] = (fan_out,)
    return shapes


def glorot_limit(shape):
    return math.sqrt(6.0 / (shape[0] + shape[1]))


def init_params(hyper, seed=0):
    """Glorot-uniform kernels, zero biases."""
    rng = stream(seed, 0x1417)
    params = {}
    for name, shape in param_shapes(hyper).items():
        if len(shape) == 2:
            lim = glorot_limit(shape)
            params[name] = rng.uniform(-lim, lim, size=shape)
        else:
            params[name] = np.zeros(shape)
    return params


def regularized_names():
    return [f"msg_{name}_W" for name in MESSAGE_MAPS]


def zeros_like(params):
    return {k: np.zeros_like(v) for k, v in params.items()}


# --------------------------------------------------------------------------- activations


def sigmoid(x):
    return expit(x)


def softplus(x):
    return np.logaddexp(0.0, x)


def selu(x):
    return SELU_LAMBDA * np.where(x > 0, x, SELU_ALPHA * np.expm1(np.minimum(x, 0.0)))


def selu_grad(x):
    return SELU_LAMBDA * np.where(x > 0, 1.0, SELU_ALPHA * np.exp(np.minimum(x, 0.0)))


# --------------------------------------------------------------------------- structure


def _csr(rows, cols, shape, data=None):
    order = np.lexsort((cols, rows))
    indptr = np.zeros(shape[0] + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=shape[0]), out=indptr[1:])
    data = np.ones(len(rows)) if data is None else data[order]
    return sp.csr_matrix((data, cols[order], indptr), shape=shape)


class _Incidence:
    """Sparse SLA x component incidence for both edge types, with degrees.

    ``recv_s`` / ``recv_c`` stack both incidence kinds with the degree
    diagonals so that each node type gathers all incoming messages in one
    sparse product (see ``_messages``).
    """

    def __init__(self, graph):
        ns, nc = graph.n_slas, graph.n_components
        self.ns, self.nc = ns, nc
        self.deg_s = {}
        self.deg_c = {}
        self.edges = {"p": graph.edges_working, "b": graph.edges_backup}
        for kind, e in self.edges.items():
            self.deg_s[kind] = np.bincount(e[:, 0], minlength=ns).astype(np.float64)[:, None]
            self.deg_c[kind] = np.bincount(e[:, 1], minlength=nc).astype(np.float64)[:, None]
        self.recv_s = self._stacked(self.edges, 0, ns, nc, self.deg_s)
        self.recv_c = self._stacked(self.edges, 1, nc, ns, self.deg_c)

    @functools.cached_property
    def mats(self):
        # per-kind incidences, only needed by the backward pass
        out = {}
        for kind, e in self.edges.items():
            out[kind] = _csr(e[:, 0], e[:, 1], (self.ns, self.nc))
            out[kind + "T"] = _csr(e[:, 1], e[:, 0], (self.nc, self.ns))
        return out

    @staticmethod
    def _stacked(edges, side, n_recv, n_send, deg):
        # columns: [senders via working | senders via backup | self, working | self, backup]
        ids = np.arange(n_recv)
        p, b = edges["p"], edges["b"]
        rows = np.concatenate([p[:, side], b[:, side], ids, ids])
        cols = np.concatenate(
            [p[:, 1 - side], n_send + b[:, 1 - side], 2 * n_send + ids, 2 * n_send + n_recv + ids]
        )
        data = np.concatenate([np.ones(len(p) + len(b)), deg["p"][:, 0], deg["b"][:, 0]])
        return _csr(rows, cols, (n_recv, 2 * (n_send + n_recv)), data)


def _pad(x, width):
    out = np.zeros((x.shape[0], width))
    out[:, : x.shape[1]] = x
    return out


def _check_inputs(hyper, graph, features):
    if features.component.shape != (graph.n_components, len(COMPONENT_COLUMNS)):
        raise ParameterError(
            f"component features must be ({graph.n_components}, {len(COMPONENT_COLUMNS)}),"
            f" got {features.component.shape}"
        )
    if features.sla.shape != (graph.n_slas, len(SLA_COLUMNS)):
        raise ParameterError(
            f"SLA features must be ({graph.n_slas}, {len(SLA_COLUMNS)}), got {features.sla.shape}"
        )


# --------------------------------------------------------------------------- GRU


def _gru_forward(params, node, x, h, h_zr):
    """``h_zr`` is the precomputed ``h @ U[:, :2H]``."""
    H = h.shape[1]
    W, U, b = params[f"gru_{node}_W"], params[f"gru_{node}_U"], params[f"gru_{node}_b"]
    gx = x @ W
    gx += b
    zr = expit(gx[:, : 2 * H] + h_zr)
    z = zr[:, :H]
    r = zr[:, H:]
    rh = r * h
    n = rh @ U[:, 2 * H :]
    n += gx[:, 2 * H :]
    np.tanh(n, out=n)
    h_new = n + z * (h - n)
    return h_new, (x, h, z, r, rh, n)


def _gru_backward(params, grads, node, cache, dh_new):
    x, h, z, r, rh, n = cache
    H = h.shape[1]
    W, U = params[f"gru_{node}_W"], params[f"gru_{node}_U"]
    dn = dh_new * (1.0 - z)
    dz = dh_new * (h - n)
    dh = dh_new * z
    dn_pre = dn * (1.0 - n * n)
    d_rh = dn_pre @ U[:, 2 * H :].T
    dr = d_rh * h
    dh += d_rh * r
    dz_pre = dz * z * (1.0 - z)
    dr_pre = dr * r * (1.0 - r)
    dzr = np.concatenate([dz_pre, dr_pre], axis=1)
    dgx = np.concatenate([dzr, dn_pre], axis=1)
    grads[f"gru_{node}_W"] += x.T @ dgx
    grads[f"gru_{node}_b"] += dgx.sum(axis=0)
    grads[f"gru_{node}_U"][:, : 2 * H] += h.T @ dzr
    grads[f"gru_{node}_U"][:, 2 * H :] += rh.T @ dn_pre
    dh += dzr @ U[:, : 2 * H].T
    dx = dgx @ W.T
    return dx, dh


# --------------------------------------------------------------------------- messages


def _fused_weights(params, H):
    """Per-node-type weight blocks that share a left operand, side by side.

    Column layout for node type X (SLA "s" or component "c"), each block of
    width M except the last (2H): sender half of the X->Y maps for both edge
    kinds, receiver half of the Y->X maps for both kinds, GRU z/r recurrence.
    """
    fused = {}
    for node, out, inc_ in (("s", "sc", "cs"), ("c", "cs", "sc")):
        fused[node] = np.concatenate(
            [
                params[f"msg_p_{out}_W"][:H],
                params[f"msg_b_{out}_W"][:H],
                params[f"msg_p_{inc_}_W"][H:],
                params[f"msg_b_{inc_}_W"][H:],
                params[f"gru_{node}_U"][:, : 2 * H],
            ],
            axis=1,
        )
    return fused


def _message_bias(params, inc):
    """Receiver-side bias terms, constant across iterations."""
    b_c = inc.deg_c["p"] * params["msg_p_sc_b"] + inc.deg_c["b"] * params["msg_b_sc_b"]
    b_s = inc.deg_s["p"] * params["msg_p_cs_b"] + inc.deg_s["b"] * params["msg_b_cs_b"]
    return b_c, b_s


def _messages(inc, bias, proj_c, proj_s, M):
    """Summed incoming messages from the fused projections of both node types.

    A message over an edge is the affine map of (sender, receiver); its sum
    over a receiver's edges splits into an incidence-weighted sender part and
    a degree-weighted receiver part.
    """
    m_c = inc.recv_c @ np.concatenate(
        [proj_s[:, :M], proj_s[:, M : 2 * M], proj_c[:, 2 * M : 3 * M], proj_c[:, 3 * M : 4 * M]]
    )
    m_s = inc.recv_s @ np.concatenate(
        [proj_c[:, :M], proj_c[:, M : 2 * M], proj_s[:, 2 * M : 3 * M], proj_s[:, 3 * M : 4 * M]]
    )
    return m_c + bias[0], m_s + bias[1]


def _messages_backward(params, grads, inc, h_c, h_s, dm_c, dm_s):
    H = h_c.shape[1]
    dh_c = np.zeros_like(h_c)
    dh_s = np.zeros_like(h_s)
    for kind in ("p", "b"):
        # SLA -> component
        W = params[f"msg_{kind}_sc_W"]
        g = grads[f"msg_{kind}_sc_W"]
        up = inc.mats[kind] @ dm_c  # gradient w.r.t. h_s @ W[:H], per SLA
        local = inc.deg_c[kind] * dm_c
        g[:H] += h_s.T @ up
        g[H:] += h_c.T @ local
        grads[f"msg_{kind}_sc_b"] += local.sum(axis=0)
        dh_s += up @ W[:H].T
        dh_c += local @ W[H:].T
        # component -> SLA
        W = params[f"msg_{kind}_cs_W"]
        g = grads[f"msg_{kind}_cs_W"]
        up = inc.mats[kind + "T"] @ dm_s
        local = inc.deg_s[kind] * dm_s
        g[:H] += h_c.T @ up
        g[H:] += h_s.T @ local
        grads[f"msg_{kind}_cs_b"] += local.sum(axis=0)
        dh_c += up @ W[:H].T
        dh_s += local @ W[H:].T
    return dh_c, dh_s


# --------------------------------------------------------------------------- forward


def dropout_masks(hyper, n_slas, rng):
    """Inverted-dropout masks for the readout hidden layers."""
    masks = []
    for rate, width in zip(hyper.dropout_rates, hyper.readout_sizes):
        if rate == 0.0:
            masks.append(None)
            continue
        keep = rng.random((n_slas, width)) >= rate
        masks.append(keep / (1.0 - rate))
    return masks


def forward(params, hyper, graph, features, rng=None, masks=None):
    """Predict per-SLA Student-t parameters.

    ``rng`` (or explicit ``masks``) switches on Train-mode dropout in the
    readout; with neither the pass is deterministic (Eval mode).
    ``features`` must already be normalized.
    """
    _check_inputs(hyper, graph, features)
    H = hyper.hidden_dim
    inc = _Incidence(graph)
    h_c = _pad(features.component, H)
    h_s = _pad(features.sla, H)
    M = hyper.msg_dim
    fused = _fused_weights(params, H)
    bias = _message_bias(params, inc)
    steps = []
    for _ in range(hyper.T):
        proj_c = h_c @ fused["c"]
        proj_s = h_s @ fused["s"]
        m_c, m_s = _messages(inc, bias, proj_c, proj_s, M)
        h_c_new, gc = _gru_forward(params, "c", m_c, h_c, proj_c[:, 4 * M :])
        h_s_new, gs = _gru_forward(params, "s", m_s, h_s, proj_s[:, 4 * M :])
        steps.append((h_c, h_s, gc, gs))
        h_c, h_s = h_c_new, h_s_new
    if masks is None and rng is not None:
        masks = dropout_masks(hyper, graph.n_slas, rng)
    n_hidden = len(hyper.readout_sizes)
    a = h_s
    layers = []
    for i in range(n_hidden):
        pre = a @ params[f"readout_{i}_W"] + params[f"readout_{i}_b"]
        act = selu(pre)
        mask = masks[i] if masks is not None and i < len(masks) else None
        out = act * mask if mask is not None else act
        layers.append((a, pre, mask))
        a = out
    raw = a @ params[f"readout_{n_hidden}_W"] + params[f"readout_{n_hidden}_b"]
    layers.append((a, None, None))
    mu = raw[:, 0].copy()
    sigma = softplus(raw[:, 1]) + SCALE_FLOOR
    cache = {"inc": inc, "steps": steps, "layers": layers, "raw": raw, "h_s": h_s}
    return Prediction(mu, sigma, hyper.nu, cache)


def backward(params, hyper, prediction, d_mu, d_sigma):
    """Gradients of a scalar objective given its partials w.r.t. (mu, sigma)."""
    cache = prediction.cache
    grads = zeros_like(params)
    n_hidden = len(hyper.readout_sizes)
    raw = cache["raw"]
    d_raw = np.column_stack([d_mu, d_sigma * sigmoid(raw[:, 1])])
    a, _, _ = cache["layers"][n_hidden]
    grads[f"readout_{n_hidden}_W"] += a.T @ d_raw
    grads[f"readout_{n_hidden}_b"] += d_raw.sum(axis=0)
    da = d_raw @ params[f"readout_{n_hidden}_W"].T
    for i in reversed(range(n_hidden)):
        a_in, pre, mask = cache["layers"][i]
        if mask is not None:
            da = da * mask
        d_pre = da * selu_grad(pre)
        grads[f"readout_{i}_W"] += a_in.T @ d_pre
        grads[f"readout_{i}_b"] += d_pre.sum(axis=0)
        da = d_pre @ params[f"readout_{i}_W"].T
    dh_s = da
    dh_c = np.zeros((cache["inc"].nc, hyper.hidden_dim))
    inc = cache["inc"]
    for h_c, h_s, gc, gs in reversed(cache["steps"]):
        dm_c, dh_c_prev = _gru_backward(params, grads, "c", gc, dh_c)
        dm_s, dh_s_prev = _gru_backward(params, grads, "s", gs, dh_s)
        dc, ds = _messages_backward(params, grads, inc, h_c, h_s, dm_c, dm_s)
        dh_c = dh_c_prev + dc
        dh_s = dh_s_prev + ds
    return grads


# --------------------------------------------------------------------------- likelihood


def student_t_logpdf(y, mu, sigma, nu=5.0):
    z = (np.asarray(y, dtype=np.float64) - mu) / sigma
    const = gammaln((nu + 1) / 2) - gammaln(nu / 2) - 0.5 * math.log(nu * math.pi)
    return const - np.log(sigma) - (nu + 1) / 2 * np.log1p(z * z / nu)


def nll_partials(y, mu, sigma, nu):
    """d(-logpdf)/d mu and d(-logpdf)/d sigma."""
    z = (y - mu) / sigma
    common = (nu + 1) * z / (sigma * (nu + z * z))
    return -common, 1.0 / sigma - common * z


def regularization(params, hyper):
    return hyper.l2_coeff * sum(float(np.sum(params[n] ** 2)) for n in regularized_names())


def sla_weights(sla_offsets):
    """Per-SLA weights giving mean over SLAs within a sample, then mean over samples."""
    sizes = np.diff(sla_offsets)
    used = sizes > 0
    if not used.any():
        raise ParameterError("batch contains no SLAs")
    per = np.zeros_like(sizes, dtype=np.float64)
    per[used] = 1.0 / (sizes[used] * used.sum())
    return np.repeat(per, sizes)


def loss(params, hyper, graph, features, labels, sla_offsets=None, rng=None, masks=None,
         return_prediction=False):
    """Mean Student-t NLL plus L2 on the message kernels.

    ``graph``/``features``/``labels`` describe one sample or a disjoint-union
    batch whose sample boundaries are ``sla_offsets``.
    """
    if sla_offsets is None:
        sla_offsets = np.array([0, graph.n_slas])
    pred = forward(params, hyper, graph, features, rng=rng, masks=masks)
    w = sla_weights(sla_offsets)
    nll = -student_t_logpdf(labels, pred.mu, pred.sigma, hyper.nu)
    value = float(np.dot(w, nll)) + regularization(params, hyper)
    if return_prediction:
        return value, pred
    return value


def gradients(params, hyper, graph, features, labels, sla_offsets=None, rng=None, masks=None):
    """Returns ``(loss, grads)``; dropout masks are drawn once and held fixed."""
    if sla_offsets is None:
        sla_offsets = np.array([0, graph.n_slas])
    if masks is None and rng is not None:
        masks = dropout_masks(hyper, graph.n_slas, rng)
    value, pred = loss(
        params, hyper, graph, features, labels, sla_offsets, masks=masks, return_prediction=True
    )
    w = sla_weights(sla_offsets)
    d_mu, d_sigma = nll_partials(np.asarray(labels, dtype=np.float64), pred.mu, pred.sigma, hyper.nu)
    grads = backward(params, hyper, pred, w * d_mu, w * d_sigma)
    for name in regularized_names():
        grads[name] += 2.0 * hyper.l2_coeff * params[name]
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient in parameter block {name!r}")
    return value, grads


def predict(params, hyper, graph, features):
    pred = forward(params, hyper, graph, features)
    pred.cache = None
    return pred


def predict_mc_dropout(params, hyper, graph, features, n_passes, seed=0):
    """Average of ``n_passes`` Train-mode passes with independent dropout masks."""
    if n_passes < 1:
        raise ParameterError("n_passes must be >= 1")
    mu = np.zeros(graph.n_slas)
    sigma = np.zeros(graph.n_slas)
    for i in range(n_passes):
        p = forward(params, hyper, graph, features, rng=stream(seed, i))
        mu += p.mu
        sigma += p.sigma
    return Prediction(mu / n_passes, sigma / n_passes, hyper.nu)


# --------------------------------------------------------------------------- checkpoints


def checkpoint_to_dict(params, hyper, stats=None, extra=None):
    doc = {
        "version": CHECKPOINT_VERSION,
        "hyper": hyper.to_dict(),
        "norm_stats": stats.to_dict() if stats is not None else None,
        "params": [
            {"name": k, "shape": list(v.shape), "values": v.ravel().tolist()}
            for k, v in params.items()
        ],
    }
    if extra:
        doc["extra"] = extra
    return doc


def checkpoint_from_dict(doc):
    if doc.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version {doc.get('version')!r}")
    hyper = Hyper.from_dict(doc["hyper"])
    stats = NormStats.from_dict(doc["norm_stats"]) if doc.get("norm_stats") else None
    expected = param_shapes(hyper)
    params = {}
    for item in doc["params"]:
        shape = tuple(item["shape"])
        if expected.get(item["name"]) != shape:
            raise DataError(f"parameter {item['name']!r} has unexpected shape {shape}")
        params[item["name"]] = np.array(item["values"], dtype=np.float64).reshape(shape)
    missing = set(expected) - set(params)
    if missing:
        raise DataError(f"checkpoint misses parameters {sorted(missing)}")
    params = {k: params[k] for k in expected}
    return params, hyper, stats


def save_checkpoint(path, params, hyper, stats=None, extra=None):
    with open(path, "w") as fh:
        json.dump(checkpoint_to_dict(params, hyper, stats, extra), fh)


def load_checkpoint(path):
    with open(path) as fh:
        return checkpoint_from_dict(json.load(fh))
