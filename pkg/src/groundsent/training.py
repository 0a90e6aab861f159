"""Parameter initialization, composite objectives, Adam, and the training loop.

Recurrent square blocks are initialized orthogonally (sign-corrected QR of
seeded Gaussians); everything else uses xavier-uniform bounds. Gradients
are value-clipped elementwise before each Adam step. Runs are fully
determined by (config, seed, corpus): shuffling and dropout streams are
re-derived per epoch from the seed, so resuming from an epoch checkpoint
reproduces the uninterrupted trajectory.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Matrix, Tape
from .data import (
    PAD, Batch, Corpus, EmbeddingTable, Vocabulary, build_vocab, make_batches, numericalize,
)
from .decoder import DecoderParams, caption_nll
from .encoder import EncoderParams, LstmCellParams, encode_sentence
from .grounding import ProjectionParams, grounding_loss

OBJECTIVES = ("cap2cap", "cap2img", "cap2all")

# SeedSequence stream tags, so the independent RNG uses never collide.
_SEED_INIT, _SEED_DROPOUT = 11, 23


@dataclass
class TrainConfig:
    objective: str = "cap2all"
    d_cell: int = 32
    d_a: int = 16
    n_a: int = 4
    d_e: int = 32
    d_img: int = 64
    d_p: int | None = None  # None -> d_img
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip: float = 5.0
    epochs: int = 50
    seed: int = 0
    dropout: float = 0.3

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}, expected one of {OBJECTIVES}")
        if self.d_p is None:
            self.d_p = self.d_img
        for name in ("d_cell", "d_a", "n_a", "d_e", "d_img", "d_p", "epochs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 for in-batch negatives")
        if self.clip <= 0:
            raise ValueError("clip bound must be positive")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ModelParameters:
    """Every trainable tensor, grouped by sub-model."""

    embeddings: Matrix
    encoder: EncoderParams
    decoder: DecoderParams
    projection: ProjectionParams

    def named(self) -> dict[str, Matrix]:
        """Flat name -> tensor view; each trainable tensor appears exactly once."""
        out = {
            "embeddings": self.embeddings,
            "enc_fwd_input_w": self.encoder.forward_cell.input_w,
            "enc_fwd_recur_w": self.encoder.forward_cell.recur_w,
            "enc_fwd_bias": self.encoder.forward_cell.bias,
            "enc_bwd_input_w": self.encoder.backward_cell.input_w,
            "enc_bwd_recur_w": self.encoder.backward_cell.recur_w,
            "enc_bwd_bias": self.encoder.backward_cell.bias,
            "attn_proj": self.encoder.attn_proj,
            "attn_heads": self.encoder.attn_heads,
            "dec_init_h": self.decoder.init_h_proj,
            "dec_init_c": self.decoder.init_c_proj,
            "dec_input_w": self.decoder.cell.input_w,
            "dec_recur_w": self.decoder.cell.recur_w,
            "dec_bias": self.decoder.cell.bias,
            "dec_out_w": self.decoder.out_w,
            "dec_out_b": self.decoder.out_b,
        }
        for i in range(4):
            out[f"proj_w{i + 1}"] = self.projection.weights[i]
            out[f"proj_b{i + 1}"] = self.projection.biases[i]
        return out

    def recurrent_blocks(self):
        """Yield (name, d x d block) for each gate block of the recurrent weights."""
        for name in ("enc_fwd_recur_w", "enc_bwd_recur_w", "dec_recur_w"):
            w = self.named()[name].data
            d = w.shape[0]
            for gate in range(4):
                yield f"{name}[gate{gate}]", w[:, gate * d : (gate + 1) * d]

    def zero_grads(self) -> None:
        for m in self.named().values():
            m.grad = None


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int,
            shape: tuple[int, int]) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def _orthogonal(rng: np.random.Generator, n: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def _init_cell(rng: np.random.Generator, d_in: int, d: int) -> LstmCellParams:
    input_w = np.hstack([_xavier(rng, d_in, d, (d_in, d)) for _ in range(4)])
    recur_w = np.hstack([_orthogonal(rng, d) for _ in range(4)])
    bias = np.zeros((1, 4 * d))
    bias[0, d : 2 * d] = 1.0  # forget-gate bias
    return LstmCellParams(input_w=Matrix(input_w), recur_w=Matrix(recur_w), bias=Matrix(bias))


def init_params(config: TrainConfig, vocab_size: int,
                embedding_table: EmbeddingTable | None = None) -> ModelParameters:
    """Build all trainable tensors from the config seed.

    Word embeddings come from `embedding_table` when given (file-loaded),
    otherwise uniform in [-0.1, 0.1] with the PAD row zeroed.
    """
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, _SEED_INIT]))
    d, d_e, d_a, n_a = config.d_cell, config.d_e, config.d_a, config.n_a
    d_p, d_img, v = config.d_p, config.d_img, vocab_size

    if embedding_table is not None:
        if embedding_table.weights.rows != v or embedding_table.dim != d_e:
            raise ValueError(
                f"embedding table is {embedding_table.weights.shape}, expected ({v}, {d_e})"
            )
        emb = Matrix(embedding_table.weights.data.copy())
    else:
        weights = rng.uniform(-0.1, 0.1, size=(v, d_e))
        weights[PAD] = 0.0
        emb = Matrix(weights)

    encoder = EncoderParams(
        forward_cell=_init_cell(rng, d_e, d),
        backward_cell=_init_cell(rng, d_e, d),
        attn_proj=Matrix(_xavier(rng, d, d_a, (d_a, d))),
        attn_heads=Matrix(_xavier(rng, d_a, n_a, (n_a, d_a))),
    )
    decoder = DecoderParams(
        init_h_proj=Matrix(_xavier(rng, 2 * d, d, (d, 2 * d))),
        init_c_proj=Matrix(_xavier(rng, 2 * d, d, (d, 2 * d))),
        cell=_init_cell(rng, d_e, d),
        out_w=Matrix(_xavier(rng, d, v, (v, d))),
        out_b=Matrix(np.zeros((1, v))),
    )
    dims = [(2 * d, d_p), (d_p, d_p), (d_p, d_p), (d_p, d_img)]
    projection = ProjectionParams(
        weights=[Matrix(_xavier(rng, a, b, (a, b))) for a, b in dims],
        biases=[Matrix(np.zeros((1, b))) for _, b in dims],
        dropout_p=config.dropout,
    )
    return ModelParameters(embeddings=emb, encoder=encoder, decoder=decoder,
                           projection=projection)


def assemble_params(config: TrainConfig, vocab_size: int,
                    tensors: dict[str, Matrix]) -> ModelParameters:
    """Rebuild a ModelParameters from named tensors (checkpoint loading)."""
    skeleton = init_params(config, vocab_size)
    expected = skeleton.named()
    if set(tensors) != set(expected):
        missing = set(expected) - set(tensors)
        extra = set(tensors) - set(expected)
        raise ValueError(f"tensor set mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
    for name, placeholder in expected.items():
        if tensors[name].shape != placeholder.shape:
            raise ValueError(
                f"tensor {name}: shape {tensors[name].shape}, expected {placeholder.shape}"
            )
        placeholder.data = tensors[name].data
    return skeleton


# ---------------------------------------------------------------------------
# objectives


def composite_loss(objective: str, batch: Batch, params: ModelParameters,
                   train_mode: bool = True, rng: np.random.Generator | None = None):
    """Forward one batch under the requested objective.

    Returns (loss Matrix, caption-loss float, grounding-loss float); the
    component not used by a single-task objective reports 0.0. The caption
    loss is summed over tokens and averaged over the batch.
    """
    if objective not in OBJECTIVES:
        raise ValueError(f"unknown objective {objective!r}")
    reps = []
    for k in range(batch.size):
        rep, _ = encode_sentence(params.encoder, params.embeddings, batch.src_ids(k))
        reps.append(rep.combined)

    terms = []
    loss_c = loss_vg = 0.0
    if objective in ("cap2cap", "cap2all"):
        total = None
        for k in range(batch.size):
            nll = caption_nll(params.decoder, params.embeddings, reps[k], batch.tgt_ids(k))
            total = nll if total is None else ad.add(total, nll)
        mean_nll = ad.scale(total, 1.0 / batch.size)
        loss_c = mean_nll.item()
        terms.append(mean_nll)
    if objective in ("cap2img", "cap2all"):
        stacked = ad.stack_rows(reps)
        vg = grounding_loss(stacked, batch.images, params.projection,
                            train_mode=train_mode, rng=rng)
        loss_vg = vg.item()
        terms.append(vg)

    loss = terms[0] if len(terms) == 1 else ad.add(terms[0], terms[1])
    return loss, loss_c, loss_vg


def clip_gradients(grads: dict[str, np.ndarray], bound: float) -> dict[str, np.ndarray]:
    """Elementwise value clipping to [-bound, bound], in place."""
    if bound <= 0:
        raise ValueError("clip bound must be positive")
    for g in grads.values():
        np.clip(g, -bound, bound, out=g)
    return grads


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: ModelParameters) -> "AdamState":
        named = params.named()
        return cls(step=0,
                   m={k: np.zeros_like(p.data) for k, p in named.items()},
                   v={k: np.zeros_like(p.data) for k, p in named.items()})


def adam_step(tensors: dict[str, Matrix], grads: dict[str, np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update over all tensors; increments the shared step."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, tensor in tensors.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        tensor.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class EpochMetrics:
    epoch: int
    objective: str
    loss: float
    loss_c: float
    loss_vg: float
    wall_ms: float

    def to_record(self) -> dict:
        return {"epoch": self.epoch, "objective": self.objective, "loss": self.loss,
                "loss_c": self.loss_c, "loss_vg": self.loss_vg, "wall_ms": self.wall_ms}


@dataclass
class TrainResult:
    params: ModelParameters
    adam: AdamState
    vocab: Vocabulary
    metrics: list[EpochMetrics]
    checkpoint_path: str | None = None


def train_step(batch: Batch, params: ModelParameters, adam: AdamState, config: TrainConfig,
               rng: np.random.Generator | None = None) -> tuple[float, float, float]:
    """Forward, backward, clip, Adam, and PAD-row re-zeroing for one batch."""
    params.zero_grads()
    with Tape() as tape:
        loss, loss_c, loss_vg = composite_loss(config.objective, batch, params,
                                               train_mode=True, rng=rng)
        loss_value = loss.item()
        if not np.isfinite(loss_value):
            raise FloatingPointError(f"non-finite loss {loss_value} at step {adam.step + 1}")
        tape.backward(loss)
    named = params.named()
    grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data))
             for k, p in named.items()}
    grads["embeddings"][PAD, :] = 0.0  # PAD row is excluded from updates
    clip_gradients(grads, config.clip)
    adam_step(named, grads, adam, config.lr, config.beta1, config.beta2, config.adam_eps)
    params.embeddings.data[PAD, :] = 0.0
    return loss_value, loss_c, loss_vg


def train(config: TrainConfig, corpus: Corpus, out_dir=None,
          embedding_table: EmbeddingTable | None = None,
          resume_from=None, log_fn=None) -> TrainResult:
    """Run the epoch loop over a corpus.

    Writes (when out_dir is given) a checkpoint after every epoch plus a
    JSONL metrics log with one record per epoch. `resume_from` restores
    parameters, optimizer state, and the epoch counter from a checkpoint
    and continues up to config.epochs.
    """
    from . import checkpoint as ckpt
    from pathlib import Path

    if corpus.d_img != config.d_img:
        raise ValueError(
            f"corpus d_img={corpus.d_img} does not match config d_img={config.d_img}"
        )
    vocab = build_vocab(corpus, min_count=1)
    samples = numericalize(corpus, vocab)

    if resume_from is not None:
        params, adam, loaded_config, loaded_vocab, start_epoch = ckpt.load(resume_from)
        ours, theirs = config.to_dict(), loaded_config.to_dict()
        ours.pop("epochs"), theirs.pop("epochs")  # resuming may extend the run
        if ours != theirs:
            raise ValueError("resume config does not match checkpoint config")
        if loaded_vocab.tokens != vocab.tokens:
            raise ValueError("resume corpus produces a different vocabulary")
        vocab = loaded_vocab
    else:
        params = init_params(config, vocab.size, embedding_table)
        adam = AdamState.for_params(params)
        start_epoch = 0

    out_path = None
    metrics_path = None
    if out_dir is not None:
        out_path = Path(out_dir)
        out_path.mkdir(parents=True, exist_ok=True)
        metrics_path = out_path / "metrics.jsonl"
        if resume_from is None and metrics_path.exists():
            metrics_path.unlink()

    history: list[EpochMetrics] = []
    checkpoint_path = None
    for epoch in range(start_epoch, config.epochs):
        started = time.monotonic()
        dropout_rng = np.random.default_rng(
            np.random.SeedSequence([config.seed, _SEED_DROPOUT, epoch])
        )
        sums = np.zeros(3)
        batches = make_batches(samples, config.batch_size, config.seed, epoch)
        for batch in batches:
            sums += train_step(batch, params, adam, config, rng=dropout_rng)
        means = sums / len(batches)
        record = EpochMetrics(
            epoch=epoch, objective=config.objective,
            loss=float(means[0]), loss_c=float(means[1]), loss_vg=float(means[2]),
            wall_ms=(time.monotonic() - started) * 1000.0,
        )
        history.append(record)
        if log_fn is not None:
            log_fn(record)
        if out_path is not None:
            with open(metrics_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record.to_record()) + "\n")
            checkpoint_path = str(out_path / "checkpoint.bin")
            ckpt.save(checkpoint_path, params, adam, config, vocab, epoch + 1)

    return TrainResult(params=params, adam=adam, vocab=vocab, metrics=history,
                       checkpoint_path=checkpoint_path)
