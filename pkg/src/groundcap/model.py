"""Two-layer top-down attention LSTM decoder over projected object features.

Decoding step t:
    x_t   = embedding column of the previous token
    h1,c1 = LSTM1([x_t, mean(z), h2_{t-1}], (h1, c1))
    ct    = additive attention of h1 over the object vectors z
    h2,c2 = LSTM2([ct, h1], (h2, c2))
    p     = softmax(W_out h2 + b_out)

Object features v enter through a trainable bias-free projection
z = W_in v. States start at zero and the first input token is BOS.
Training feeds the ground-truth previous token at every step (teacher
forcing) and applies inverted dropout to x_t, h1 and h2 before their
consumers; the dropped h2 feeds both the output projection and the next
step's LSTM1 input. Inference decodes greedily until EOS or the length
cap, argmax ties broken toward the lowest token id.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import kernels, numeric
from .autodiff import Tensor
from .data import BOS_ID, EOS_ID
from .errors import DataValidationError, DomainError, ShapeError

INIT_SCALE = 0.08
FORGET_BIAS = 1.0
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    feature_size: int
    hidden_size: int = 512
    att_size: int | None = None  # None -> hidden_size

    @property
    def att_width(self) -> int:
        return self.hidden_size if self.att_size is None else self.att_size


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, v, a = cfg.hidden_size, cfg.vocab_size, cfg.att_width
    return {
        "input_proj": (d, cfg.feature_size),
        "embedding": (d, v),
        "lstm1.wx": (4 * d, 3 * d),
        "lstm1.wh": (4 * d, d),
        "lstm1.b": (4 * d,),
        "att.proj": (a, 2 * d),
        "att.score": (a,),
        "lstm2.wx": (4 * d, 2 * d),
        "lstm2.wh": (4 * d, d),
        "lstm2.b": (4 * d,),
        "out.w": (v, d),
        "out.b": (v,),
    }


@dataclass
class ModelParams:
    """All trainable arrays plus the config that shaped them."""

    config: ModelConfig
    arrays: dict[str, np.ndarray]

    @classmethod
    def init(cls, config: ModelConfig, rng: np.random.Generator) -> "ModelParams":
        """Uniform(-0.08, 0.08) matrices, zero biases, forget-gate bias +1."""
        arrays = {}
        for name, shape in param_shapes(config).items():
            if name.endswith(".b"):
                arrays[name] = np.zeros(shape)
            else:
                arrays[name] = rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape)
        d = config.hidden_size
        arrays["lstm1.b"][d : 2 * d] = FORGET_BIAS
        arrays["lstm2.b"][d : 2 * d] = FORGET_BIAS
        return cls(config=config, arrays=arrays)

    def validate(self) -> None:
        expected = param_shapes(self.config)
        if set(expected) != set(self.arrays):
            raise DataValidationError(
                f"parameter names {sorted(self.arrays)} do not match expected {sorted(expected)}"
            )
        for name, shape in expected.items():
            got = self.arrays[name].shape
            if got != shape:
                raise DataValidationError(f"parameter {name}: shape {got}, expected {shape}")
            if not np.isfinite(self.arrays[name]).all():
                raise DataValidationError(f"parameter {name} has non-finite entries")

    def copy(self) -> "ModelParams":
        return ModelParams(
            config=self.config, arrays={k: v.copy() for k, v in self.arrays.items()}
        )

    def tensors(self, tape: ad.GradientTape) -> dict[str, Tensor]:
        return {name: tape.parameter(name, arr) for name, arr in self.arrays.items()}

    def constants(self) -> dict[str, Tensor]:
        return {name: Tensor(arr) for name, arr in self.arrays.items()}


def save_checkpoint(params: ModelParams, path: Path, extra: dict | None = None) -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "model": {
            "vocab_size": params.config.vocab_size,
            "feature_size": params.config.feature_size,
            "hidden_size": params.config.hidden_size,
            "att_size": params.config.att_size,
        },
        "params": {
            name: {"shape": list(arr.shape), "data": [float(x) for x in arr.ravel()]}
            for name, arr in sorted(params.arrays.items())
        },
    }
    if extra:
        payload["extra"] = extra
    Path(path).write_text(json.dumps(payload, sort_keys=True))


def load_checkpoint(path: Path) -> tuple[ModelParams, dict]:
    try:
        payload = json.loads(Path(path).read_text())
        if payload["format_version"] != CHECKPOINT_VERSION:
            raise DataValidationError(
                f"unsupported checkpoint version {payload['format_version']}"
            )
        m = payload["model"]
        config = ModelConfig(
            vocab_size=int(m["vocab_size"]),
            feature_size=int(m["feature_size"]),
            hidden_size=int(m["hidden_size"]),
            att_size=None if m["att_size"] is None else int(m["att_size"]),
        )
        arrays = {
            name: np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
            for name, entry in payload["params"].items()
        }
    except DataValidationError:
        raise
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as err:
        raise DataValidationError(f"malformed checkpoint {path}: {err}") from err
    params = ModelParams(config=config, arrays=arrays)
    params.validate()
    return params, payload.get("extra", {})


# ---------------------------------------------------------------------------
# single-example operations
# ---------------------------------------------------------------------------

def project_features(features: np.ndarray, w_in: np.ndarray) -> np.ndarray:
    """Bias-free linear projection z_i = W_in v_i applied rowwise."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != w_in.shape[1]:
        raise ShapeError(f"features {features.shape} do not match projection {w_in.shape}")
    return features @ w_in.T


def mean_pool(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < 1:
        raise DomainError("mean_pool needs at least one vector")
    return z.mean(axis=0)


def lstm_step(
    x: np.ndarray,
    state: tuple[np.ndarray, np.ndarray],
    wx: np.ndarray,
    wh: np.ndarray,
    b: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Single LSTM cell step on 1-D arrays; returns (h', c')."""
    h_prev, c_prev = state
    pre = (x @ wx.T + h_prev @ wh.T + b)[None, :]
    h, c, *_ = kernels.lstm_gates_forward(pre, np.ascontiguousarray(c_prev[None, :]))
    return h[0], c[0]


def attend(h1: np.ndarray, z: np.ndarray, wa: np.ndarray, wav: np.ndarray) -> np.ndarray:
    """Attention context vector for one decoder state over k object rows."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < 1:
        raise DomainError("attend needs at least one object vector")
    with ad.no_grad():
        out = ad.attend(
            Tensor(h1[None, :]),
            Tensor(z[None, :, :]),
            np.ones((1, z.shape[0])),
            Tensor(wa),
            Tensor(wav),
        )
    return out.data[0]


@dataclass
class DecoderState:
    h1: np.ndarray
    c1: np.ndarray
    h2: np.ndarray
    c2: np.ndarray

    @classmethod
    def zeros(cls, d: int) -> "DecoderState":
        return cls(np.zeros(d), np.zeros(d), np.zeros(d), np.zeros(d))


def decode_step(
    y_prev: int,
    state: DecoderState,
    z: np.ndarray,
    z_bar: np.ndarray,
    params: ModelParams,
) -> tuple[np.ndarray, DecoderState]:
    """One inference step: distribution over the vocabulary plus new state."""
    cfg = params.config
    if not 0 <= y_prev < cfg.vocab_size:
        raise DomainError(f"token id {y_prev} outside vocabulary of size {cfg.vocab_size}")
    a = params.arrays
    x = a["embedding"][:, y_prev]
    in1 = np.concatenate([x, z_bar, state.h2])
    h1, c1 = lstm_step(in1, (state.h1, state.c1), a["lstm1.wx"], a["lstm1.wh"], a["lstm1.b"])
    ct = attend(h1, z, a["att.proj"], a["att.score"])
    in2 = np.concatenate([ct, h1])
    h2, c2 = lstm_step(in2, (state.h2, state.c2), a["lstm2.wx"], a["lstm2.wh"], a["lstm2.b"])
    probs = numeric.softmax(a["out.w"] @ h2 + a["out.b"])
    return probs, DecoderState(h1, c1, h2, c2)


def sequence_logprob(
    features: np.ndarray,
    tokens: list[int],
    params: ModelParams,
    dropout_rate: float = 0.0,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Per-step log p(y*_t | y*_{<t}) under teacher forcing for one example.

    With dropout_rate 0 this is deterministic. A positive rate requires an
    rng and samples one inverted-dropout mask per (x_t, h1, h2) per step,
    the training-time behaviour.
    """
    if dropout_rate > 0.0 and rng is None:
        raise DomainError("dropout_rate > 0 requires an rng")
    a = params.arrays
    keep = 1.0 - dropout_rate

    def drop(v: np.ndarray) -> np.ndarray:
        if dropout_rate == 0.0:
            return v
        return v * ((rng.random(v.shape) >= dropout_rate) / keep)

    z = project_features(features, a["input_proj"])
    z_bar = mean_pool(z)
    d = params.config.hidden_size
    h1 = np.zeros(d)
    c1 = np.zeros(d)
    h2 = np.zeros(d)
    c2 = np.zeros(d)
    h2_fed = h2
    lps = np.empty(len(tokens))
    y_prev = BOS_ID
    for t, target in enumerate(tokens):
        x = drop(a["embedding"][:, y_prev])
        in1 = np.concatenate([x, z_bar, h2_fed])
        h1, c1 = lstm_step(in1, (h1, c1), a["lstm1.wx"], a["lstm1.wh"], a["lstm1.b"])
        h1d = drop(h1)
        ct = attend(h1d, z, a["att.proj"], a["att.score"])
        in2 = np.concatenate([ct, h1d])
        h2, c2 = lstm_step(in2, (h2, c2), a["lstm2.wx"], a["lstm2.wh"], a["lstm2.b"])
        h2_fed = drop(h2)
        lps[t] = numeric.log_softmax(a["out.w"] @ h2_fed + a["out.b"])[target]
        y_prev = target
    return lps


def select_greedy_token(logits_or_probs: np.ndarray) -> int:
    """Argmax with ties broken toward the lowest token id."""
    return int(np.argmax(logits_or_probs))


def greedy_decode(z: np.ndarray, params: ModelParams, max_len: int = 16) -> list[int]:
    """Greedy caption for projected object vectors z; EOS is not emitted."""
    if max_len < 1:
        raise DomainError(f"max_len must be >= 1, got {max_len}")
    z = np.asarray(z, dtype=np.float64)
    z_bar = mean_pool(z)
    state = DecoderState.zeros(params.config.hidden_size)
    out: list[int] = []
    y = BOS_ID
    while len(out) < max_len:
        probs, state = decode_step(y, state, z, z_bar, params)
        y = select_greedy_token(probs)
        if y == EOS_ID:
            break
        out.append(y)
    return out


# ---------------------------------------------------------------------------
# batched teacher-forced forward (training path)
# ---------------------------------------------------------------------------

@dataclass
class DropoutPlan:
    rate: float
    rng: np.random.Generator | None

    def apply(self, t: Tensor) -> Tensor:
        if self.rate == 0.0 or self.rng is None:
            return t
        return ad.dropout(t, self.rate, self.rng)


NO_DROPOUT = DropoutPlan(rate=0.0, rng=None)


@dataclass
class BatchForward:
    """Everything the loss heads need from one teacher-forced pass."""

    per_example_logprob: Tensor  # (B,) mean log p of each target sequence
    projected_flat: Tensor  # (N, d) projected object rows of the unique images
    flat_labels: np.ndarray  # (N,) class ids aligned with projected_flat


def batch_forward(
    p: dict[str, Tensor],
    cfg: ModelConfig,
    features: list[np.ndarray],
    labels: list[list[int]],
    image_of_example: list[int],
    tokens: list[list[int]],
    dropout_plan: DropoutPlan = NO_DROPOUT,
) -> BatchForward:
    """Teacher-forced mean log-likelihood per (image, caption) example.

    ``features``/``labels`` describe the batch's unique images;
    ``image_of_example[e]`` maps example e to its image, so several
    captions of one image share a single projection.
    """
    d = cfg.hidden_size
    batch = len(tokens)
    if batch == 0:
        raise DomainError("empty batch")
    if any(len(t) == 0 for t in tokens):
        raise DomainError("every caption must have at least one target token")

    counts_img = np.array([f.shape[0] for f in features])
    offsets_img = np.concatenate([[0], np.cumsum(counts_img)[:-1]]).astype(np.int64)
    z_flat = ad.linear(Tensor(np.concatenate(features, axis=0)), p["input_proj"])

    offsets = np.array([offsets_img[i] for i in image_of_example])
    counts = np.array([counts_img[i] for i in image_of_example])
    width = int(counts.max())
    z_pad = ad.pad_rows(z_flat, offsets, counts, width)
    mask = (np.arange(width)[None, :] < counts[:, None]).astype(np.float64)
    z_bar = ad.mul(ad.sum_(z_pad, axis=1), Tensor((1.0 / counts)[:, None]))

    t_max = max(len(t) for t in tokens)
    targets = np.full((batch, t_max), EOS_ID, dtype=np.int64)
    t_mask = np.zeros((batch, t_max))
    for e, seq in enumerate(tokens):
        targets[e, : len(seq)] = seq
        t_mask[e, : len(seq)] = 1.0
    inputs = np.full((batch, t_max), BOS_ID, dtype=np.int64)
    inputs[:, 1:] = targets[:, :-1]

    hc1 = Tensor(np.zeros((batch, 2 * d)))
    hc2 = Tensor(np.zeros((batch, 2 * d)))
    h2_fed = Tensor(np.zeros((batch, d)))
    total_logprob: Tensor | None = None
    for t in range(t_max):
        x = dropout_plan.apply(ad.embedding_cols(p["embedding"], inputs[:, t]))
        in1 = ad.concat([x, z_bar, h2_fed], axis=1)
        hc1 = ad.lstm_cell(in1, hc1, p["lstm1.wx"], p["lstm1.wh"], p["lstm1.b"])
        h1 = dropout_plan.apply(ad.slice_cols(hc1, 0, d))
        ct = ad.attend(h1, z_pad, mask, p["att.proj"], p["att.score"])
        in2 = ad.concat([ct, h1], axis=1)
        hc2 = ad.lstm_cell(in2, hc2, p["lstm2.wx"], p["lstm2.wh"], p["lstm2.b"])
        h2_fed = dropout_plan.apply(ad.slice_cols(hc2, 0, d))
        logits = ad.linear(h2_fed, p["out.w"], p["out.b"])
        step_lp = ad.gather_cols(ad.log_softmax(logits, axis=1), targets[:, t])
        masked = ad.mul(step_lp, Tensor(t_mask[:, t]))
        total_logprob = masked if total_logprob is None else ad.add(total_logprob, masked)

    lengths = np.array([float(len(t)) for t in tokens])
    per_example = ad.mul(total_logprob, Tensor(1.0 / lengths))
    flat_labels = (
        np.concatenate([np.asarray(l, dtype=np.int64) for l in labels])
        if labels
        else np.zeros(0, dtype=np.int64)
    )
    return BatchForward(
        per_example_logprob=per_example,
        projected_flat=z_flat,
        flat_labels=flat_labels,
    )
