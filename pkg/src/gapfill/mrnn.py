"""Two-block recurrent estimator for missing traffic measurements.

The interpolation block is a stack of two bidirectional GRU layers (hidden
size 2 per direction) shared across streams.  Each stream feeds its own
(z, m, delta) sequence through the stack; when estimating time t the
forward state has consumed inputs only up to t-1 and the backward state
only from t+1 on, with zero states at the boundaries, so an entry never
informs its own estimate.  A per-stream sigmoid readout of the
concatenated lagged states yields the within-stream estimate x_tilde.

The imputation block is a single sigmoid affine layer over
u_t = [z_t * m_t ; m_t ; x_tilde_t].  The D x D sub-matrices acting on
z_t * m_t and on m_t carry hard zero diagonals, enforced structurally in
the forward pass and re-zeroed after every optimizer step: the final
estimate x_hat_t^d cannot copy its own observed value, and it cannot
lean on its own mask indicator (which is constant at training targets
but zero wherever a fill is actually needed).

Both blocks train jointly by Adam on the masked squared-error objective:
per segment, sum of m * (x_hat - x)^2 over the grid divided by the number
of observed entries, summed over segments.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .data import Cohort
from .errors import (
    DivergenceError,
    PreconditionError,
    ShapeError,
    UntrainableError,
)
from .masking import MaskedTriplet, build_triplet
from .nncore import (
    AdamState,
    ParamStore,
    adam_step,
    gru_sequence_backward,
    gru_sequence_recorded,
    init_params,
    sigmoid,
)

INPUT_FEATURES = 3  # per-stream, per-step input: (z, m, rescaled delta)
DEFAULT_HIDDEN = 2
DEFAULT_LAYERS = 2

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class MrnnModel:
    """Trainable parameters of both blocks plus the dims record."""

    params: ParamStore
    n_streams: int
    hidden: int
    layers: int
    delta_scale: float
    norm_params: tuple[tuple[float, float], ...] | None = None


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and schedule settings for :func:`train`.

    The 0.01 learning rate is calibrated so the default epoch budget
    reaches the noise floor on cohorts of a few hundred segments; smaller
    rates converge but need several times more epochs.
    """

    lr: float = 0.01
    epochs: int = 500
    batch: int = 32
    patience: int = 25
    val_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise PreconditionError(f"lr must be > 0, got {self.lr}")
        if self.epochs < 1:
            raise PreconditionError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch < 1:
            raise PreconditionError(f"batch must be >= 1, got {self.batch}")
        if self.patience < 1:
            raise PreconditionError(f"patience must be >= 1, got {self.patience}")
        if not 0.0 < self.val_fraction < 1.0:
            raise PreconditionError(f"val_fraction must be in (0, 1), got {self.val_fraction}")


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float


def _param_plan(n_streams: int, hidden: int, layers: int) -> dict[str, tuple]:
    plan: dict[str, tuple] = {}
    for direction in ("fw", "bw"):
        for layer in range(layers):
            width = INPUT_FEATURES if layer == 0 else hidden
            p = f"gru.{direction}{layer}"
            for gate in ("z", "r", "h"):
                plan[f"{p}.W_{gate}"] = (hidden, width)
                plan[f"{p}.U_{gate}"] = (hidden, hidden)
                plan[f"{p}.b_{gate}"] = (hidden,)
    plan["out.W"] = (n_streams, 2 * hidden)
    plan["out.b"] = (n_streams,)
    plan["imp.W"] = (n_streams, 3 * n_streams)
    plan["imp.b"] = (n_streams,)
    return plan


def _diag_mask(n_streams: int) -> np.ndarray:
    # Block the target coordinate's own inputs: its observed value (z * m)
    # and its mask indicator.  The latter is constant 1 at every training
    # target, so any weight on it is an untrainable bias that would vanish
    # exactly where the model is used (m = 0), shifting every fill.
    mask = np.ones((n_streams, n_streams * 3))
    rows = np.arange(n_streams)
    mask[rows, rows] = 0.0
    mask[rows, n_streams + rows] = 0.0
    return mask


def _diag_flat_indices(store: ParamStore, n_streams: int) -> np.ndarray:
    """Flat-vector positions of the structurally zero imp.W diagonals."""
    offset = 0
    for name, v in store.items():
        if name == "imp.W":
            rows = np.arange(n_streams)
            zm_diag = offset + rows * (3 * n_streams) + rows
            m_diag = zm_diag + n_streams
            return np.concatenate([zm_diag, m_diag])
        offset += v.size
    raise ShapeError("parameter store has no imp.W block")


def new_model(
    n_streams: int,
    seed: int,
    delta_scale: float = 1.0,
    hidden: int = DEFAULT_HIDDEN,
    layers: int = DEFAULT_LAYERS,
    norm_params=None,
) -> MrnnModel:
    """Freshly initialized model with the zero diagonal already applied."""
    params = init_params(_param_plan(n_streams, hidden, layers), seed)
    blocks = dict(params.items())
    blocks["imp.W"] = blocks["imp.W"] * _diag_mask(n_streams)
    return MrnnModel(
        params=ParamStore(blocks),
        n_streams=n_streams,
        hidden=hidden,
        layers=layers,
        delta_scale=float(delta_scale),
        norm_params=norm_params,
    )


# ---------------------------------------------------------------------------
# Forward / backward over a batch of segments
# ---------------------------------------------------------------------------

def _forward(params: ParamStore, z: np.ndarray, m: np.ndarray, dn: np.ndarray,
             hidden: int, layers: int, keep_records: bool = False):
    """Run both blocks over a batch.

    ``z``, ``m``, ``dn`` are (B, D, L) with delta already rescaled.  Streams
    share the GRU stack, so segments and streams fold into one row axis of
    size R = B * D.  Returns (x_tilde, x_hat) as (B, D, L) arrays plus a
    cache for the backward pass when requested.
    """
    B, D, L = z.shape
    R = B * D
    xs = np.stack([z, m, dn], axis=-1).transpose(2, 0, 1, 3).reshape(L, R, INPUT_FEATURES)

    fw_records = []
    seq = xs
    for layer in range(layers):
        seq, rec = gru_sequence_recorded(params.view(f"gru.fw{layer}"), seq)
        fw_records.append(rec)
    f_used = np.concatenate([np.zeros((1, R, hidden)), seq[:-1]], axis=0)

    bw_records = []
    seq = xs[::-1]
    for layer in range(layers):
        seq, rec = gru_sequence_recorded(params.view(f"gru.bw{layer}"), seq)
        bw_records.append(rec)
    bstates = seq[::-1]
    b_used = np.concatenate([bstates[1:], np.zeros((1, R, hidden))], axis=0)

    fb = np.concatenate([f_used, b_used], axis=-1).reshape(L, B, D, 2 * hidden)
    logits = np.einsum("lbdk,dk->lbd", fb, params["out.W"]) + params["out.b"]
    x_tilde_lbd = sigmoid(logits)

    zm = (z * m).transpose(0, 2, 1)                 # (B, L, D)
    m_blt = m.transpose(0, 2, 1)
    xt_blt = x_tilde_lbd.transpose(1, 0, 2)
    u = np.concatenate([zm, m_blt, xt_blt], axis=-1)  # (B, L, 3D)
    w_eff = params["imp.W"] * _diag_mask(D)
    x_hat_blt = sigmoid(u @ w_eff.T + params["imp.b"])

    x_tilde = xt_blt.transpose(0, 2, 1)
    x_hat = x_hat_blt.transpose(0, 2, 1)
    if not keep_records:
        return x_tilde, x_hat, None
    cache = {
        "fw_records": fw_records,
        "bw_records": bw_records,
        "fb": fb,
        "u": u,
        "w_eff": w_eff,
        "x_tilde_blt": xt_blt,
        "x_hat_blt": x_hat_blt,
        "dims": (B, D, L),
    }
    return x_tilde, x_hat, cache


def _backward(params: ParamStore, cache: dict, d_x_hat: np.ndarray,
              hidden: int, layers: int) -> ParamStore:
    """Gradients of a scalar loss given d(loss)/d(x_hat) as (B, D, L)."""
    B, D, L = cache["dims"]
    R = B * D
    grads: dict[str, np.ndarray] = {}

    da = d_x_hat.transpose(0, 2, 1) * cache["x_hat_blt"] * (1.0 - cache["x_hat_blt"])
    flat_da = da.reshape(-1, D)
    grads["imp.W"] = (flat_da.T @ cache["u"].reshape(-1, 3 * D)) * _diag_mask(D)
    grads["imp.b"] = flat_da.sum(0)
    du = da @ cache["w_eff"]

    dxt_blt = du[..., 2 * D :]
    dlogits = (dxt_blt * cache["x_tilde_blt"] * (1.0 - cache["x_tilde_blt"])).transpose(1, 0, 2)
    grads["out.W"] = np.einsum("lbd,lbdk->dk", dlogits, cache["fb"])
    grads["out.b"] = dlogits.sum((0, 1))
    dfb = (dlogits[..., None] * params["out.W"][None, None, :, :]).reshape(L, R, 2 * hidden)

    df_used, db_used = dfb[..., :hidden], dfb[..., hidden:]
    dfstates = np.concatenate([df_used[1:], np.zeros((1, R, hidden))], axis=0)
    dbstates_rev = np.concatenate([np.zeros((1, R, hidden)), db_used[:-1]], axis=0)[::-1]

    for direction, records, dstates in (
        ("fw", cache["fw_records"], dfstates),
        ("bw", cache["bw_records"], dbstates_rev),
    ):
        upstream = dstates
        for layer in range(layers - 1, -1, -1):
            dparams, dxs, _ = gru_sequence_backward(records[layer], upstream, need_dx=layer > 0)
            for key, val in dparams.items():
                grads[f"gru.{direction}{layer}.{key}"] = val
            upstream = dxs

    return ParamStore({name: grads[name] for name in params.names()})


def _masked_loss(x_hat: np.ndarray, target: np.ndarray, m: np.ndarray) -> tuple[float, np.ndarray]:
    """Per-segment normalized masked SSE summed over the batch, and its gradient."""
    resid = (x_hat - target) * m
    counts = m.sum(axis=(1, 2))
    safe = np.maximum(counts, 1.0)
    per_segment = (resid**2).sum(axis=(1, 2)) / safe
    loss = float(per_segment[counts > 0].sum())
    d_x_hat = 2.0 * resid / safe[:, None, None]
    d_x_hat[counts == 0] = 0.0
    return loss, d_x_hat


def loss_and_gradients(
    params: ParamStore, z: np.ndarray, m: np.ndarray, dn: np.ndarray,
    hidden: int = DEFAULT_HIDDEN, layers: int = DEFAULT_LAYERS,
) -> tuple[float, ParamStore]:
    """Joint training loss over a batch and its analytic parameter gradients."""
    _, x_hat, cache = _forward(params, z, m, dn, hidden, layers, keep_records=True)
    loss, d_x_hat = _masked_loss(x_hat, z, m)
    return loss, _backward(params, cache, d_x_hat, hidden, layers)


def batch_loss(params: ParamStore, z, m, dn, hidden=DEFAULT_HIDDEN, layers=DEFAULT_LAYERS) -> float:
    _, x_hat, _ = _forward(params, z, m, dn, hidden, layers)
    return _masked_loss(x_hat, z, m)[0]


# ---------------------------------------------------------------------------
# Spec-level block operations
# ---------------------------------------------------------------------------

def interpolate_block(model: MrnnModel, triplet: MaskedTriplet) -> np.ndarray:
    """Within-stream estimates x_tilde for one segment, shape (D, L)."""
    if triplet.z.shape[0] != model.n_streams:
        raise ShapeError(
            f"triplet has {triplet.z.shape[0]} streams, model expects {model.n_streams}"
        )
    z = triplet.z[None]
    m = triplet.m[None]
    dn = triplet.delta[None] * model.delta_scale
    x_tilde, _, _ = _forward(model.params, z, m, dn, model.hidden, model.layers)
    return x_tilde[0]


def impute_block(model: MrnnModel, z_t: np.ndarray, m_t: np.ndarray, x_tilde_t: np.ndarray) -> np.ndarray:
    """Cross-stream estimate x_hat for one timestamp, shape (D,)."""
    z_t = np.asarray(z_t, float)
    m_t = np.asarray(m_t, float)
    x_tilde_t = np.asarray(x_tilde_t, float)
    if not z_t.shape == m_t.shape == x_tilde_t.shape == (model.n_streams,):
        raise ShapeError(f"inputs must all have shape ({model.n_streams},)")
    u = np.concatenate([z_t * m_t, m_t, x_tilde_t])
    w_eff = model.params["imp.W"] * _diag_mask(model.n_streams)
    return sigmoid(w_eff @ u + model.params["imp.b"])


def predict(model: MrnnModel, triplet: MaskedTriplet) -> np.ndarray:
    """Final estimates x_hat for one segment, shape (D, L)."""
    if triplet.z.shape[0] != model.n_streams:
        raise ShapeError(
            f"triplet has {triplet.z.shape[0]} streams, model expects {model.n_streams}"
        )
    z = triplet.z[None]
    m = triplet.m[None]
    dn = triplet.delta[None] * model.delta_scale
    _, x_hat, _ = _forward(model.params, z, m, dn, model.hidden, model.layers)
    return x_hat[0]


# ---------------------------------------------------------------------------
# Training and single imputation
# ---------------------------------------------------------------------------

def cohort_arrays(cohort: Cohort, delta_scale: float | None = None):
    """Stack a cohort's triplets into (Z, M, Dn) batch arrays.

    When ``delta_scale`` is None it is derived as 1 / (L * median grid
    spacing) so rescaled gaps stay commensurate with the unit-scaled values.
    """
    triplets = [build_triplet(s) for s in cohort.segments]
    z = np.stack([t.z for t in triplets])
    m = np.stack([t.m for t in triplets])
    delta = np.stack([t.delta for t in triplets])
    if delta_scale is None:
        ts = cohort.timestamps
        spacing = float(np.median(np.diff(ts))) if ts.size > 1 else 1.0
        delta_scale = 1.0 / (cohort.length * max(spacing, 1.0))
    return z, m, delta * delta_scale, float(delta_scale)


def train(cohort: Cohort, config: TrainConfig) -> tuple[MrnnModel, list[EpochStats]]:
    """Jointly fit both blocks on a masked, unit-scaled cohort.

    Adam minimizes the masked squared-error objective over shuffled
    mini-batches of segments; a seeded split holds out a validation
    fraction and training stops once validation loss has not improved for
    ``patience`` epochs.  Returns the best-validation model and the loss
    trace (entry 0 is the initialization).  Deterministic given
    ``config.seed``.
    """
    if cohort.norm_params is None:
        raise PreconditionError("train requires a normalized cohort")
    z, m, dn, delta_scale = cohort_arrays(cohort)
    if m.sum() == 0:
        raise UntrainableError("every entry of every segment is missing")

    n = cohort.n_segments
    seq = np.random.SeedSequence(config.seed)
    split_ss, init_ss, epoch_ss = seq.spawn(3)
    if n >= 2:
        perm = np.random.default_rng(split_ss).permutation(n)
        n_val = min(max(int(round(config.val_fraction * n)), 1), n - 1)
        val_idx, train_idx = perm[:n_val], perm[n_val:]
    else:
        val_idx = train_idx = np.array([0])

    model0 = new_model(cohort.n_streams, init_ss, delta_scale=delta_scale)
    base = model0.params
    theta = base.flatten()
    diag_flat = _diag_flat_indices(base, cohort.n_streams)

    state = AdamState.zeros(theta.size)
    rng_epoch = np.random.default_rng(epoch_ss)

    def val_loss_of(params: ParamStore) -> float:
        return batch_loss(params, z[val_idx], m[val_idx], dn[val_idx])

    params = base
    train_loss = batch_loss(params, z[train_idx], m[train_idx], dn[train_idx])
    val_loss = val_loss_of(params)
    trace = [EpochStats(epoch=0, train_loss=train_loss, val_loss=val_loss)]
    best_val, best_theta, bad = val_loss, theta.copy(), 0

    for epoch in range(1, config.epochs + 1):
        # Running epoch loss: batch objectives at the parameters in use when
        # each batch was visited.  Validation loss is an exact pass.
        order = train_idx[rng_epoch.permutation(train_idx.size)]
        running = 0.0
        for start in range(0, order.size, config.batch):
            idx = order[start : start + config.batch]
            loss, grads = loss_and_gradients(params, z[idx], m[idx], dn[idx])
            if not np.isfinite(loss):
                raise DivergenceError(epoch)
            running += loss
            theta, state = adam_step(theta, grads.flatten(), state, config.lr)
            theta[diag_flat] = 0.0
            params = base.unflatten(theta)
        val_loss = val_loss_of(params)
        if not np.isfinite(val_loss):
            raise DivergenceError(epoch)
        trace.append(EpochStats(epoch=epoch, train_loss=running, val_loss=val_loss))
        if val_loss < best_val:
            best_val, best_theta, bad = val_loss, theta.copy(), 0
        else:
            bad += 1
            if bad >= config.patience:
                break

    model = MrnnModel(
        params=base.unflatten(best_theta),
        n_streams=cohort.n_streams,
        hidden=model0.hidden,
        layers=model0.layers,
        delta_scale=delta_scale,
        norm_params=cohort.norm_params,
    )
    return model, trace


def impute(model: MrnnModel, cohort: Cohort) -> Cohort:
    """Fill every missing entry with the model's single-pass estimate.

    Observed entries pass through unchanged; the result is fully observed.
    """
    if cohort.n_streams != model.n_streams:
        raise ShapeError(f"cohort has {cohort.n_streams} streams, model expects {model.n_streams}")
    if cohort.norm_params is None:
        raise PreconditionError("impute requires a normalized cohort")
    z, m, dn, _ = cohort_arrays(cohort, delta_scale=model.delta_scale)
    _, x_hat, _ = _forward(model.params, z, m, dn, model.hidden, model.layers)
    members = []
    for i, series in enumerate(cohort.segments):
        values = np.where(series.observed, series.values, x_hat[i])
        members.append(replace(series, values=values, observed=np.ones_like(series.observed)))
    return Cohort(segments=tuple(members), stream_names=cohort.stream_names, norm_params=cohort.norm_params)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_model(model: MrnnModel, path: str | Path) -> None:
    obj = {
        "format_version": CHECKPOINT_VERSION,
        "n_streams": model.n_streams,
        "hidden": model.hidden,
        "layers": model.layers,
        "delta_scale": model.delta_scale,
        "norm_params": [list(p) for p in model.norm_params] if model.norm_params else None,
        "params": json.loads(model.params.to_json()),
    }
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(obj, f, sort_keys=True, separators=(",", ":"))
        f.write("\n")


def load_model(path: str | Path) -> MrnnModel:
    with open(path, "r", encoding="utf-8") as f:
        obj = json.load(f)
    if obj.get("format_version") != CHECKPOINT_VERSION:
        raise PreconditionError(f"unsupported checkpoint version {obj.get('format_version')!r}")
    params = ParamStore.from_json(json.dumps(obj["params"]))
    norm = obj.get("norm_params")
    return MrnnModel(
        params=params,
        n_streams=int(obj["n_streams"]),
        hidden=int(obj["hidden"]),
        layers=int(obj["layers"]),
        delta_scale=float(obj["delta_scale"]),
        norm_params=tuple((float(a), float(b)) for a, b in norm) if norm else None,
    )
