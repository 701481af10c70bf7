from __future__ import annotations

import json
import logging
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, TypeVar, Union

import numpy as np
import pandas as pd
from scipy.special import expit
from tqdm import tqdm

from ..errors import ArgumentError, DataError, DomainError, NumericalError, SizeError
from ..state import Session, TrainConfig


logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
CHECKPOINT_VERSION = 1


@dataclass
class ModelParams:
    """
    theta = (W1, W2, b2, W3, b3).

    W1 is the n1 x n_x embedding; (U, V, b) feed the internal-state candidate
    and (Uf, Vf, bf), (Ug, Vg, bg), (Uq, Vq, bq) the forget, input and output
    gates. U-matrices are n2 x n1, V-matrices n2 x n2, biases length n2.
    W3 is n_x x n2 and b3 length n_x.
    """

    W1: np.ndarray
    U: np.ndarray
    V: np.ndarray
    b: np.ndarray
    Uf: np.ndarray
    Vf: np.ndarray
    bf: np.ndarray
    Ug: np.ndarray
    Vg: np.ndarray
    bg: np.ndarray
    Uq: np.ndarray
    Vq: np.ndarray
    bq: np.ndarray
    W3: np.ndarray
    b3: np.ndarray

    @property
    def n_x(self) -> int:
        return int(self.W1.shape[1])

    @property
    def n1(self) -> int:
        return int(self.W1.shape[0])

    @property
    def n2(self) -> int:
        return int(self.V.shape[0])

    def arrays(self) -> Dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray]) -> "ModelParams":
        return cls(**{name: np.asarray(arrays[name], dtype=np.float64) for name in PARAM_NAMES})

    def zeros_like(self) -> "ModelParams":
        return ModelParams.from_arrays({k: np.zeros_like(v) for k, v in self.arrays().items()})

    def copy(self) -> "ModelParams":
        return ModelParams.from_arrays({k: v.copy() for k, v in self.arrays().items()})

    def __add__(self, other: "ModelParams") -> "ModelParams":
        return ModelParams.from_arrays({k: v + getattr(other, k) for k, v in self.arrays().items()})

    def all_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.arrays().values())


PARAM_NAMES: Tuple[str, ...] = tuple(f.name for f in fields(ModelParams))


@dataclass(frozen=True)
class LstmState:
    s: np.ndarray
    h: np.ndarray


@dataclass(frozen=True)
class StepOutput:
    z: np.ndarray
    y_hat: np.ndarray


@dataclass
class AdamState:
    t: int
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def init_params(n_x: int, n1: int = 20, n2: int = 50, seed: int = 0) -> ModelParams:
    """Uniform Xavier weights on [-a, a], a = sqrt(6 / (fan_in + fan_out)); zero biases."""
    if min(n_x, n1, n2) < 1:
        raise ArgumentError(f"dimensions must be positive, got n_x={n_x}, n1={n1}, n2={n2}")
    rng = np.random.default_rng(seed)

    def xavier(rows: int, cols: int) -> np.ndarray:
        a = np.sqrt(6.0 / (rows + cols))
        return rng.uniform(-a, a, size=(rows, cols))

    return ModelParams(
        W1=xavier(n1, n_x),
        U=xavier(n2, n1),
        V=xavier(n2, n2),
        b=np.zeros(n2),
        Uf=xavier(n2, n1),
        Vf=xavier(n2, n2),
        bf=np.zeros(n2),
        Ug=xavier(n2, n1),
        Vg=xavier(n2, n2),
        bg=np.zeros(n2),
        Uq=xavier(n2, n1),
        Vq=xavier(n2, n2),
        bq=np.zeros(n2),
        W3=xavier(n_x, n2),
        b3=np.zeros(n_x),
    )


def zero_state(n2: int, batch: Optional[int] = None) -> LstmState:
    shape = (n2,) if batch is None else (batch, n2)
    return LstmState(s=np.zeros(shape), h=np.zeros(shape))


def _check_items(params: ModelParams, items: Sequence[int]) -> None:
    n_x = params.n_x
    for item in items:
        if item < 0 or item >= n_x:
            raise DomainError(f"item {item} outside catalog [0, {n_x})")


def embed(params: ModelParams, item: int) -> np.ndarray:
    """h1 = W1 x for a one-hot x: column `item` of W1."""
    _check_items(params, [item])
    return params.W1[:, item].copy()


def _gates(
    params: ModelParams, h1: np.ndarray, h_prev: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    f = expit(h1 @ params.Uf.T + h_prev @ params.Vf.T + params.bf)
    g = expit(h1 @ params.Ug.T + h_prev @ params.Vg.T + params.bg)
    q = expit(h1 @ params.Uq.T + h_prev @ params.Vq.T + params.bq)
    c = expit(h1 @ params.U.T + h_prev @ params.V.T + params.b)
    return f, g, q, c


def lstm_step(params: ModelParams, h1: np.ndarray, prev: LstmState) -> LstmState:
    """One LSTM update; h1 may be a vector or a (batch, n1) block."""
    f, g, q, c = _gates(params, h1, prev.h)
    s = f * prev.s + g * c
    return LstmState(s=s, h=q * np.tanh(s))


def output_step(params: ModelParams, h2: np.ndarray) -> StepOutput:
    z = h2 @ params.W3.T + params.b3
    return StepOutput(z=z, y_hat=softmax(z))


def forward_prefix(params: ModelParams, prefix: Sequence[int]) -> StepOutput:
    if len(prefix) == 0:
        raise ArgumentError("prefix must contain at least one item")
    _check_items(params, prefix)
    state = zero_state(params.n2)
    for item in prefix:
        state = lstm_step(params, params.W1[:, item], state)
    return output_step(params, state.h)


def forward_session(params: ModelParams, session: Sequence[int]) -> List[StepOutput]:
    """Predictions for x_2..x_L, one per consumed item except the last."""
    if len(session) < 2:
        raise SizeError(f"a session needs at least 2 items, got {len(session)}")
    _check_items(params, session)
    state = zero_state(params.n2)
    outputs: List[StepOutput] = []
    for item in session[:-1]:
        state = lstm_step(params, params.W1[:, item], state)
        outputs.append(output_step(params, state.h))
    return outputs


def loss_ce(y_hat: np.ndarray, target: int) -> float:
    return float(-np.log(max(float(y_hat[target]), PROB_FLOOR)))


def loss_bpr(step: StepOutput, target: int, negatives: Sequence[int]) -> float:
    """-log sum_j y_hat[j] * sigmoid(z[target] - z[j]) over sampled negatives j."""
    neg = np.asarray(negatives, dtype=np.int64)
    if neg.size == 0:
        raise ArgumentError("BPR needs at least one negative sample")
    if np.any(neg == target):
        raise ArgumentError(f"target {target} appears among the negatives")
    total = float(np.sum(step.y_hat[neg] * expit(step.z[target] - step.z[neg])))
    return float(-np.log(max(total, PROB_FLOOR)))


@dataclass
class _PackedBatch:
    inputs: np.ndarray  # (T, B)
    targets: np.ndarray  # (T, B)
    mask: np.ndarray  # (T, B)
    t_idx: np.ndarray  # active steps, session-major
    b_idx: np.ndarray


def _pack(batch: Sequence[Session], n_x: int) -> _PackedBatch:
    lengths = [len(s) for s in batch]
    if min(lengths) < 2:
        raise SizeError("every session in a batch needs at least 2 items")
    steps = max(lengths) - 1
    inputs = np.zeros((steps, len(batch)), dtype=np.int64)
    targets = np.zeros((steps, len(batch)), dtype=np.int64)
    mask = np.zeros((steps, len(batch)), dtype=bool)
    for b, session in enumerate(batch):
        arr = np.asarray(session, dtype=np.int64)
        if arr.min() < 0 or arr.max() >= n_x:
            raise DomainError(f"session holds an item outside catalog [0, {n_x})")
        n = len(arr) - 1
        inputs[:n, b] = arr[:-1]
        targets[:n, b] = arr[1:]
        mask[:n, b] = True
    b_idx, t_idx = np.nonzero(mask.T)
    return _PackedBatch(inputs=inputs, targets=targets, mask=mask, t_idx=t_idx, b_idx=b_idx)


def sample_negatives(rng: np.random.Generator, targets: np.ndarray, n_x: int, n_samples: int) -> np.ndarray:
    """Uniform draws with replacement from the catalog minus each row's target."""
    draws = rng.integers(0, n_x - 1, size=(len(targets), n_samples))
    return draws + (draws >= targets[:, None])


def _output_grad_ce(y_hat: np.ndarray, targets: np.ndarray) -> Tuple[float, np.ndarray]:
    rows = np.arange(len(targets))
    p = y_hat[rows, targets]
    loss = float(-np.log(np.maximum(p, PROB_FLOOR)).sum())
    dz = y_hat.copy()
    dz[rows, targets] -= 1.0
    dz[p < PROB_FLOOR] = 0.0
    return loss, dz


def _output_grad_bpr(
    z: np.ndarray, y_hat: np.ndarray, targets: np.ndarray, negatives: np.ndarray
) -> Tuple[float, np.ndarray]:
    n, n_x = z.shape
    rows = np.arange(n)
    sig = expit(z[rows, targets][:, None] - z[rows[:, None], negatives])
    w = y_hat[rows[:, None], negatives] * sig
    total = w.sum(axis=1)
    loss = float(-np.log(np.maximum(total, PROB_FLOOR)).sum())

    d_total = -y_hat * total[:, None]
    d_total[rows, targets] += (w * (1.0 - sig)).sum(axis=1)
    flat = (rows[:, None] * n_x + negatives).ravel()
    d_total += np.bincount(flat, weights=(w * sig).ravel(), minlength=n * n_x).reshape(n, n_x)

    safe = np.maximum(total, PROB_FLOOR)
    dz = -d_total / safe[:, None]
    dz[total < PROB_FLOOR] = 0.0
    return loss, dz


def loss_and_grad(
    params: ModelParams,
    batch: Sequence[Session],
    config: TrainConfig,
    rng: Optional[np.random.Generator] = None,
    negatives: Optional[Sequence[np.ndarray]] = None,
) -> Tuple[float, int, ModelParams]:
    """
    Summed loss, number of prediction steps and exact BPTT gradient for a batch.

    For bpr, `negatives` fixes the samples: one (L_i - 1, |N_S|) array per
    session. Otherwise they are drawn from `rng`, one fresh set per step.
    """
    gradient = params.zeros_like()
    if len(batch) == 0:
        return 0.0, 0, gradient

    n_x, n2 = params.n_x, params.n2
    packed = _pack(batch, n_x)
    steps, width = packed.inputs.shape

    h1_all = params.W1.T[packed.inputs]  # (T, B, n1)
    s_all = np.zeros((steps, width, n2))
    h_all = np.zeros((steps, width, n2))
    gates: List[Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]] = []
    state = zero_state(n2, width)
    for t in range(steps):
        f, g, q, c = _gates(params, h1_all[t], state.h)
        s = f * state.s + g * c
        h = q * np.tanh(s)
        gates.append((f, g, q, c))
        s_all[t], h_all[t] = s, h
        state = LstmState(s=s, h=h)

    active_h = h_all[packed.t_idx, packed.b_idx]
    targets = packed.targets[packed.t_idx, packed.b_idx]
    z = active_h @ params.W3.T + params.b3
    y_hat = softmax(z)

    if config.loss == "cross-entropy":
        loss, dz = _output_grad_ce(y_hat, targets)
    else:
        if negatives is not None:
            neg = np.concatenate([np.asarray(n, dtype=np.int64).reshape(len(s) - 1, -1) for n, s in zip(negatives, batch)])
        else:
            if rng is None:
                raise ArgumentError("bpr training needs an rng or explicit negatives")
            neg = sample_negatives(rng, targets, n_x, config.neg_samples)
        loss, dz = _output_grad_bpr(z, y_hat, targets, neg)

    gradient.W3 = dz.T @ active_h
    gradient.b3 = dz.sum(axis=0)
    d_h_out = np.zeros((steps, width, n2))
    d_h_out[packed.t_idx, packed.b_idx] = dz @ params.W3

    d_h1_all = np.zeros_like(h1_all)
    dh_next = np.zeros((width, n2))
    ds_next = np.zeros((width, n2))
    for t in reversed(range(steps)):
        f, g, q, c = gates[t]
        s = s_all[t]
        s_prev = s_all[t - 1] if t > 0 else np.zeros((width, n2))
        h_prev = h_all[t - 1] if t > 0 else np.zeros((width, n2))
        h1 = h1_all[t]
        tanh_s = np.tanh(s)

        dh = d_h_out[t] + dh_next
        dq = dh * tanh_s
        ds = ds_next + dh * q * (1.0 - tanh_s**2)
        df = ds * s_prev
        dg = ds * c
        dc = ds * g
        ds_next = ds * f

        da_f = df * f * (1.0 - f)
        da_g = dg * g * (1.0 - g)
        da_q = dq * q * (1.0 - q)
        da_c = dc * c * (1.0 - c)

        gradient.Uf += da_f.T @ h1
        gradient.Vf += da_f.T @ h_prev
        gradient.bf += da_f.sum(axis=0)
        gradient.Ug += da_g.T @ h1
        gradient.Vg += da_g.T @ h_prev
        gradient.bg += da_g.sum(axis=0)
        gradient.Uq += da_q.T @ h1
        gradient.Vq += da_q.T @ h_prev
        gradient.bq += da_q.sum(axis=0)
        gradient.U += da_c.T @ h1
        gradient.V += da_c.T @ h_prev
        gradient.b += da_c.sum(axis=0)

        d_h1_all[t] = da_f @ params.Uf + da_g @ params.Ug + da_q @ params.Uq + da_c @ params.U
        dh_next = da_f @ params.Vf + da_g @ params.Vg + da_q @ params.Vq + da_c @ params.V

    d_w1_t = np.zeros((n_x, params.n1))
    np.add.at(d_w1_t, packed.inputs.ravel(), d_h1_all.reshape(-1, params.n1))
    gradient.W1 = d_w1_t.T
    return loss, len(targets), gradient


def grad(
    params: ModelParams,
    batch: Sequence[Session],
    config: TrainConfig,
    rng: Optional[np.random.Generator] = None,
    negatives: Optional[Sequence[np.ndarray]] = None,
) -> ModelParams:
    """dJ/dtheta of the summed (not averaged) loss over every step of every session."""
    return loss_and_grad(params, batch, config, rng=rng, negatives=negatives)[2]


def total_loss(
    params: ModelParams,
    batch: Sequence[Session],
    config: TrainConfig,
    negatives: Optional[Sequence[np.ndarray]] = None,
) -> float:
    """Summed loss computed session by session through forward_session."""
    total = 0.0
    for i, session in enumerate(batch):
        outputs = forward_session(params, session)
        for t, step in enumerate(outputs):
            target = int(session[t + 1])
            if config.loss == "cross-entropy":
                total += loss_ce(step.y_hat, target)
            else:
                if negatives is None:
                    raise ArgumentError("bpr loss evaluation needs explicit negatives")
                total += loss_bpr(step, target, np.asarray(negatives[i])[t])
    return total


ArrayTree = TypeVar("ArrayTree", ModelParams, Dict[str, np.ndarray])


def init_adam(params: Union[ModelParams, Mapping[str, np.ndarray]], config: Optional[TrainConfig] = None) -> AdamState:
    arrays = params.arrays() if isinstance(params, ModelParams) else dict(params)
    cfg = config or TrainConfig()
    return AdamState(
        t=0,
        m={k: np.zeros_like(v) for k, v in arrays.items()},
        v={k: np.zeros_like(v) for k, v in arrays.items()},
        lr=cfg.lr,
        beta1=cfg.beta1,
        beta2=cfg.beta2,
        eps=cfg.eps,
    )


def adam_step(adam: AdamState, params: ArrayTree, gradient: ArrayTree) -> Tuple[ArrayTree, AdamState]:
    """
    One bias-corrected Adam update.

    Inputs are left untouched; the returned params and state are new objects.
    """
    p_arrays = params.arrays() if isinstance(params, ModelParams) else params
    g_arrays = gradient.arrays() if isinstance(gradient, ModelParams) else gradient
    t = adam.t + 1
    bc1 = 1.0 - adam.beta1**t
    bc2 = 1.0 - adam.beta2**t
    new_m: Dict[str, np.ndarray] = {}
    new_v: Dict[str, np.ndarray] = {}
    new_p: Dict[str, np.ndarray] = {}
    for name, value in p_arrays.items():
        g = g_arrays[name]
        m = adam.beta1 * adam.m[name] + (1.0 - adam.beta1) * g
        v = adam.beta2 * adam.v[name] + (1.0 - adam.beta2) * (g * g)
        new_m[name], new_v[name] = m, v
        new_p[name] = value - adam.lr * (m / bc1) / (np.sqrt(v / bc2) + adam.eps)
    state = AdamState(t=t, m=new_m, v=new_v, lr=adam.lr, beta1=adam.beta1, beta2=adam.beta2, eps=adam.eps)
    if isinstance(params, ModelParams):
        return ModelParams.from_arrays(new_p), state
    return new_p, state


def train(sessions: Sequence[Session], n_x: int, config: TrainConfig) -> Tuple[ModelParams, List[float]]:
    """
    Cold-start mini-batch training.

    Sessions are reshuffled every epoch from a generator seeded by
    config.seed; the same data, catalog and config give bit-identical params.
    Returns the final params and the mean per-step loss of every epoch.
    """
    if len(sessions) == 0:
        raise SizeError("cannot train on an empty session list")
    if config.loss == "bpr" and not 1 <= config.neg_samples < n_x:
        raise ArgumentError(f"neg_samples={config.neg_samples} must be in [1, {n_x})")

    params = init_params(n_x, config.n1, config.n2, seed=config.seed)
    adam = init_adam(params, config)
    rng = np.random.default_rng([config.seed, 1])
    trace: List[float] = []

    epochs = tqdm(range(config.epochs), desc="epochs", disable=not config.progress)
    for epoch in epochs:
        order = rng.permutation(len(sessions))
        epoch_loss = 0.0
        epoch_steps = 0
        for start in range(0, len(order), config.batch_size):
            batch = [sessions[i] for i in order[start : start + config.batch_size]]
            loss, n_steps, gradient = loss_and_grad(params, batch, config, rng=rng)
            if not np.isfinite(loss):
                raise NumericalError(f"non-finite training loss in epoch {epoch + 1}")
            params, adam = adam_step(adam, params, gradient)
            epoch_loss += loss
            epoch_steps += n_steps
        mean_loss = epoch_loss / max(epoch_steps, 1)
        trace.append(mean_loss)
        logger.debug("epoch %d/%d mean loss %.6f", epoch + 1, config.epochs, mean_loss)

    if not params.all_finite():
        raise NumericalError("training produced non-finite parameters")
    logger.info(
        "Trained %s model on %d sessions (n_x=%d): final mean loss %.4f",
        config.loss,
        len(sessions),
        n_x,
        trace[-1],
    )
    return params, trace


def top_k(scores: np.ndarray, k: int) -> List[int]:
    """Indices of the k largest scores, descending; ties go to the lower index."""
    return [int(i) for i in np.argsort(-scores, kind="stable")[:k]]


def recommend(params: ModelParams, prefix: Sequence[int], k: int) -> List[int]:
    if k < 1 or k > params.n_x:
        raise ArgumentError(f"k must be in [1, {params.n_x}], got {k}")
    return top_k(forward_prefix(params, prefix).y_hat, k)


class LstmRecommender:
    """
    recommend(prefix, k) over a trained model.

    Consecutive calls whose prefix extends the previous one by a single item
    reuse the cached LSTM state, so scoring a session costs one pass.
    """

    def __init__(self, params: ModelParams):
        self.params = params
        self._prefix: Tuple[int, ...] = ()
        self._state: Optional[LstmState] = None

    def _state_for(self, prefix: Tuple[int, ...]) -> LstmState:
        if self._state is not None and prefix[:-1] == self._prefix:
            start, state = len(prefix) - 1, self._state
        else:
            start, state = 0, zero_state(self.params.n2)
        for item in prefix[start:]:
            state = lstm_step(self.params, self.params.W1[:, item], state)
        self._prefix, self._state = prefix, state
        return state

    def recommend(self, prefix: Sequence[int], k: int) -> List[int]:
        if len(prefix) == 0:
            raise ArgumentError("prefix must contain at least one item")
        if k < 1 or k > self.params.n_x:
            raise ArgumentError(f"k must be in [1, {self.params.n_x}], got {k}")
        key = tuple(int(i) for i in prefix)
        _check_items(self.params, key)
        state = self._state_for(key)
        return top_k(output_step(self.params, state.h).y_hat, k)

    __call__ = recommend


def save_checkpoint(
    path: Path,
    params: ModelParams,
    config: TrainConfig,
    id_map: Optional[str] = None,
) -> Path:
    """Parameters plus a JSON header (format version, dims, config, id-map reference) in one .npz."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "n_x": params.n_x,
        "n1": params.n1,
        "n2": params.n2,
        "id_map": id_map,
        "train_config": config.model_dump(),
    }
    with path.open("wb") as f:
        np.savez(f, meta=np.array(json.dumps(meta, sort_keys=True)), **params.arrays())
    return path


def load_checkpoint(path: Path) -> Tuple[ModelParams, TrainConfig, Dict[str, object]]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as archive:
        meta = json.loads(str(archive["meta"]))
        if meta.get("format_version") != CHECKPOINT_VERSION:
            raise DataError(f"unsupported checkpoint version {meta.get('format_version')} in {path}")
        params = ModelParams.from_arrays({name: archive[name] for name in PARAM_NAMES})
    if (params.n_x, params.n1, params.n2) != (meta["n_x"], meta["n1"], meta["n2"]):
        raise DataError(f"checkpoint {path} dims do not match its header")
    return params, TrainConfig.model_validate(meta["train_config"]), meta


def write_loss_trace(path: Path, trace: Sequence[float]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame({"epoch": np.arange(1, len(trace) + 1), "mean_loss": list(trace)})
    frame.to_csv(path, index=False, lineterminator="\n")
    return path
