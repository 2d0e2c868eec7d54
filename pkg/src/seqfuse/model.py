"""Recurrent network with attention over visit steps and domain fusion.

Each visit step is embedded by summing embedding rows for its active CCS
indices, run through stacked GRU layers, and summarized by scaled
dot-product attention with the final hidden state as the query. The
summary fuses with the hand-crafted vector z either before ("early") or
after ("late") a small tanh MLP, or not at all ("none").

All math runs through the tape engine in 2-D tensors. Sequences of equal
length are processed as one batch; `predict` buckets mixed lengths.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import (
    Tape,
    Tensor,
    add,
    concat,
    embedding_lookup,
    hadamard,
    init_uniform,
    load_checkpoint,
    matmul,
    row_sum,
    save_checkpoint,
    scale,
    scale_rows,
    sigmoid,
    softmax,
    tanh,
    weighted_bce,
)
from .errors import DimensionError, ValidationError
from .rng import Xoshiro256, derive_seed

FUSIONS = ("early", "late", "none")
EMBEDDINGS = ("linear", "pretrained")


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int
    embed_dim: int
    hidden_dim: int
    domain_dim: int
    n_gru_layers: int = 1
    fusion: str = "early"
    mlp_hidden_dims: tuple[int, ...] = (32,)
    embedding: str = "linear"
    seed: int = 0

    def validate(self) -> None:
        for name in ("input_dim", "embed_dim", "hidden_dim"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"{name} must be positive")
        if self.domain_dim < 0:
            raise ValidationError("domain_dim must be non-negative")
        if self.n_gru_layers < 1:
            raise ValidationError("n_gru_layers must be at least 1")
        if self.fusion not in FUSIONS:
            raise ValidationError(f"fusion {self.fusion!r} not in {FUSIONS}")
        if self.fusion != "none" and self.domain_dim == 0:
            raise ValidationError("fusion with domain features requires domain_dim > 0")
        if any(h <= 0 for h in self.mlp_hidden_dims):
            raise ValidationError("mlp_hidden_dims must be positive")
        if self.embedding not in EMBEDDINGS:
            raise ValidationError(f"embedding {self.embedding!r} not in {EMBEDDINGS}")

    def to_json_obj(self) -> dict:
        obj = asdict(self)
        obj["mlp_hidden_dims"] = list(self.mlp_hidden_dims)
        return obj

    @classmethod
    def from_json_obj(cls, obj: dict) -> "ModelConfig":
        obj = dict(obj)
        obj["mlp_hidden_dims"] = tuple(obj.get("mlp_hidden_dims", ()))
        cfg = cls(**obj)
        cfg.validate()
        return cfg


def _mlp_input_dim(cfg: ModelConfig) -> int:
    return cfg.hidden_dim + cfg.domain_dim if cfg.fusion == "early" else cfg.domain_dim


def _output_input_dim(cfg: ModelConfig) -> int:
    if cfg.fusion == "none":
        return cfg.hidden_dim
    mlp_out = cfg.mlp_hidden_dims[-1] if cfg.mlp_hidden_dims else _mlp_input_dim(cfg)
    if cfg.fusion == "early":
        return mlp_out
    return cfg.hidden_dim + mlp_out


def init_params(cfg: ModelConfig, pretrained_embedding: np.ndarray | None = None) -> dict[str, Tensor]:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) per tensor, in a fixed order
    from one seeded stream, so a config and seed pin every weight."""
    cfg.validate()
    rng = Xoshiro256(derive_seed(cfg.seed, "init"))
    params: dict[str, Tensor] = {}

    if cfg.embedding == "pretrained":
        if pretrained_embedding is None:
            raise ValidationError("embedding='pretrained' requires an embedding matrix")
        if pretrained_embedding.shape != (cfg.input_dim, cfg.embed_dim):
            raise DimensionError(
                f"pretrained embedding shape {pretrained_embedding.shape} != "
                f"({cfg.input_dim}, {cfg.embed_dim})"
            )
        params["embed.W"] = Tensor(np.array(pretrained_embedding, dtype=np.float64), requires_grad=False)
        params["embed.b"] = Tensor(np.zeros((1, cfg.embed_dim)), requires_grad=False)
    else:
        params["embed.W"] = init_uniform((cfg.input_dim, cfg.embed_dim), cfg.input_dim, rng)
        params["embed.b"] = init_uniform((1, cfg.embed_dim), cfg.input_dim, rng)

    for layer in range(cfg.n_gru_layers):
        in_dim = cfg.embed_dim if layer == 0 else cfg.hidden_dim
        for gate in ("r", "z", "h"):
            params[f"gru{layer}.W_{gate}"] = init_uniform((in_dim, cfg.hidden_dim), in_dim, rng)
            params[f"gru{layer}.U_{gate}"] = init_uniform((cfg.hidden_dim, cfg.hidden_dim), cfg.hidden_dim, rng)
            params[f"gru{layer}.b_{gate}"] = init_uniform((1, cfg.hidden_dim), cfg.hidden_dim, rng)

    if cfg.fusion != "none":
        k = _mlp_input_dim(cfg)
        for i, width in enumerate(cfg.mlp_hidden_dims):
            params[f"mlp.{i}.W"] = init_uniform((k, width), k, rng)
            params[f"mlp.{i}.b"] = init_uniform((1, width), k, rng)
            k = width
    k_out = _output_input_dim(cfg)
    params["out.W"] = init_uniform((k_out, 1), k_out, rng)
    params["out.b"] = init_uniform((1, 1), k_out, rng)
    return params


class SeqFuseModel:
    def __init__(
        self,
        config: ModelConfig,
        params: dict[str, Tensor] | None = None,
        pretrained_embedding: np.ndarray | None = None,
    ):
        config.validate()
        self.config = config
        self.params = params if params is not None else init_params(config, pretrained_embedding)

    def trainable(self) -> dict[str, Tensor]:
        return {name: t for name, t in self.params.items() if t.requires_grad}

    def embed(self, step_indices: list[list[int]]) -> Tensor:
        """One time step for a batch: sum of embedding rows plus bias."""
        return add(embedding_lookup(self.params["embed.W"], step_indices), self.params["embed.b"])

    def gru_step(self, layer: int, x: Tensor, h: Tensor) -> Tensor:
        p = self.params
        r = sigmoid(add(add(matmul(x, p[f"gru{layer}.W_r"]), matmul(h, p[f"gru{layer}.U_r"])), p[f"gru{layer}.b_r"]))
        z = sigmoid(add(add(matmul(x, p[f"gru{layer}.W_z"]), matmul(h, p[f"gru{layer}.U_z"])), p[f"gru{layer}.b_z"]))
        h_tilde = tanh(
            add(add(matmul(x, p[f"gru{layer}.W_h"]), matmul(hadamard(r, h), p[f"gru{layer}.U_h"])), p[f"gru{layer}.b_h"])
        )
        # (1 - z) * h + z * h_tilde, written as h + z * (h_tilde - h).
        return add(h, hadamard(z, add(h_tilde, scale(h, -1.0))))

    def attend(self, states: list[Tensor]) -> tuple[Tensor, Tensor]:
        """Scaled dot-product attention; the last state is the query.

        Returns (summary, weights); weights rows sum to one. A length-one
        sequence passes its single state through untouched.
        """
        if not states:
            raise ValidationError("attention needs at least one state")
        query = states[-1]
        inv_sqrt_d = 1.0 / math.sqrt(self.config.hidden_dim)
        scores = [scale(row_sum(hadamard(query, h_t)), inv_sqrt_d) for h_t in states]
        attention = softmax(concat(scores, axis=1))
        t_count = len(states)
        summary: Tensor | None = None
        for t, h_t in enumerate(states):
            unit = np.zeros((t_count, 1))
            unit[t, 0] = 1.0
            coef = matmul(attention, Tensor(unit))
            term = scale_rows(h_t, coef)
            summary = term if summary is None else add(summary, term)
        return summary, attention

    def _mlp(self, x: Tensor) -> Tensor:
        for i in range(len(self.config.mlp_hidden_dims)):
            x = tanh(add(matmul(x, self.params[f"mlp.{i}.W"]), self.params[f"mlp.{i}.b"]))
        return x

    def fuse_and_output(self, summary: Tensor, z_rows: np.ndarray | None) -> tuple[Tensor, Tensor]:
        """Returns (probability, logit) for a batch of summaries."""
        cfg = self.config
        if cfg.fusion == "none":
            fused = summary
        else:
            if z_rows is None:
                raise ValidationError(f"fusion {cfg.fusion!r} requires domain features")
            if z_rows.shape != (summary.shape[0], cfg.domain_dim):
                raise DimensionError(f"z shape {z_rows.shape} != ({summary.shape[0]}, {cfg.domain_dim})")
            z_tensor = Tensor(np.array(z_rows, dtype=np.float64))
            if cfg.fusion == "early":
                fused = self._mlp(concat([summary, z_tensor], axis=1))
            else:
                fused = concat([summary, self._mlp(z_tensor)], axis=1)
        logit = add(matmul(fused, self.params["out.W"]), self.params["out.b"])
        return sigmoid(logit), logit

    def forward(
        self,
        step_lists: list[list[list[int]]],
        z_rows: np.ndarray | None,
    ) -> tuple[Tensor, Tensor, Tensor]:
        """Full pass for a batch of equal-length sequences.

        `step_lists[b][t]` holds the active input indices of sequence b at
        step t. Returns (probability, logit, attention weights).
        """
        if not step_lists:
            raise ValidationError("forward needs at least one sequence")
        t_len = len(step_lists[0])
        if t_len == 0 or any(len(steps) != t_len for steps in step_lists):
            raise DimensionError("all sequences in a batch must share one non-zero length")
        h = [Tensor(np.zeros((len(step_lists), self.config.hidden_dim))) for _ in range(self.config.n_gru_layers)]
        states: list[Tensor] = []
        for t in range(t_len):
            x = self.embed([steps[t] for steps in step_lists])
            for layer in range(self.config.n_gru_layers):
                h[layer] = self.gru_step(layer, x, h[layer])
                x = h[layer]
            states.append(x)
        summary, attention = self.attend(states)
        y, logit = self.fuse_and_output(summary, z_rows)
        return y, logit, attention

    def loss(
        self,
        step_lists: list[list[list[int]]],
        z_rows: np.ndarray | None,
        labels: np.ndarray,
        w_pos: float = 1.0,
        w_neg: float = 1.0,
    ) -> tuple[Tensor, Tensor]:
        """Weighted BCE over a mixed-length batch under the active tape.

        Sequences are grouped by length; each group runs as one batch and
        the per-event probabilities are concatenated against reordered
        labels, so the mean is over the whole input batch.
        """
        groups: dict[int, list[int]] = {}
        for i, steps in enumerate(step_lists):
            groups.setdefault(len(steps), []).append(i)
        ys: list[Tensor] = []
        order: list[int] = []
        for t_len in sorted(groups):
            idx = groups[t_len]
            z_group = z_rows[idx] if z_rows is not None else None
            y, _, _ = self.forward([step_lists[i] for i in idx], z_group)
            ys.append(y)
            order.extend(idx)
        y_all = ys[0] if len(ys) == 1 else concat(ys, axis=0)
        targets = np.asarray(labels, dtype=np.float64)[order].reshape(-1, 1)
        return weighted_bce(y_all, targets, w_pos, w_neg), y_all

    def predict(
        self,
        step_lists: list[list[list[int]]],
        z_rows: np.ndarray | None,
        batch_size: int = 256,
    ) -> tuple[np.ndarray, np.ndarray, list[np.ndarray]]:
        """Probabilities, logits, and attention rows in input order."""
        n = len(step_lists)
        probs = np.zeros(n)
        logits = np.zeros(n)
        attentions: list[np.ndarray] = [np.zeros(0)] * n
        groups: dict[int, list[int]] = {}
        for i, steps in enumerate(step_lists):
            groups.setdefault(len(steps), []).append(i)
        for t_len in sorted(groups):
            idx = groups[t_len]
            for start in range(0, len(idx), batch_size):
                chunk = idx[start : start + batch_size]
                z_group = z_rows[chunk] if z_rows is not None else None
                y, logit, attention = self.forward([step_lists[i] for i in chunk], z_group)
                for row, i in enumerate(chunk):
                    probs[i] = y.data[row, 0]
                    logits[i] = logit.data[row, 0]
                    attentions[i] = attention.data[row].copy()
        return probs, logits, attentions


def save_model(directory, model: SeqFuseModel, meta: dict | None = None) -> None:
    tensors = {name: t.data for name, t in model.params.items()}
    full_meta = {"model_config": model.config.to_json_obj()}
    if meta:
        full_meta.update(meta)
    save_checkpoint(directory, tensors, full_meta)


def load_model(directory) -> tuple[SeqFuseModel, dict]:
    arrays, meta = load_checkpoint(directory)
    cfg = ModelConfig.from_json_obj(meta["model_config"])
    frozen = {"embed.W", "embed.b"} if cfg.embedding == "pretrained" else set()
    params = {
        name: Tensor(data, requires_grad=name not in frozen) for name, data in arrays.items()
    }
    return SeqFuseModel(cfg, params=params), meta


def write_random_embedding(directory, input_dim: int, embed_dim: int, seed: int) -> np.ndarray:
    """A fixed random embedding checkpoint, a stand-in for externally
    pretrained code vectors; training leaves it untouched."""
    rng = Xoshiro256(derive_seed(seed, "pretrained_embedding"))
    matrix = init_uniform((input_dim, embed_dim), input_dim, rng).data
    save_checkpoint(
        directory,
        {"embed.W": matrix},
        {"kind": "pretrained_embedding", "input_dim": input_dim, "embed_dim": embed_dim, "seed": seed},
    )
    return matrix


def load_pretrained_embedding(directory) -> np.ndarray:
    arrays, meta = load_checkpoint(directory)
    if meta.get("kind") != "pretrained_embedding" or "embed.W" not in arrays:
        raise ValidationError(f"{directory} does not hold an embedding checkpoint")
    return arrays["embed.W"]
