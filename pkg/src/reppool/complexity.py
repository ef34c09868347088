"""Analytic multiplication counting for attention architectures.

Counts follow the score-contraction convention: one attention layer over q
queries and s keys at width d contributes q*s*d multiplications. Projection
and feed-forward counts are itemized separately (feed-forward width taken as
4d) and excluded from the headline attention ratios.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ARCHITECTURES = ("vanilla", "blockwise", "transpooler", "pyramidion")


@dataclass(frozen=True)
class ArchSpec:
    """One architecture point: layers l, input n, width d, target t, block m,
    bottleneck k, and (pyramidion only) the per-layer length schedule."""

    arch: str
    layers: int
    input_len: int
    model_dim: int
    target_len: int
    block_size: int = 0      # 0 = dense attention
    bottleneck: int = 0      # 0 = no pooling (decoder sees all n rows)
    schedule: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.arch!r}")
        if min(self.layers, self.input_len, self.model_dim, self.target_len) < 1:
            raise ValueError("layers, input_len, model_dim and target_len must be >= 1")
        if self.arch == "pyramidion":
            if not self.schedule:
                raise ValueError("pyramidion needs a schedule")
            if len(self.schedule) != self.layers:
                raise ValueError(
                    f"schedule has {len(self.schedule)} entries for {self.layers} layers"
                )
        if self.arch in ("transpooler", "pyramidion") and self.bottleneck < 1:
            raise ValueError(f"{self.arch} needs a bottleneck size")

    @property
    def encoder_lengths(self) -> tuple[int, ...]:
        if self.arch == "pyramidion":
            return tuple(self.schedule)
        return (self.input_len,) * self.layers

    @property
    def memory_rows(self) -> int:
        return self.bottleneck if self.arch in ("transpooler", "pyramidion") else self.input_len

    @property
    def attended(self) -> int:
        """Effective keys per query in encoder self-attention."""
        if self.arch == "vanilla" or self.block_size == 0:
            return self.input_len
        return self.block_size


@dataclass
class OpCountReport:
    """Itemized multiplication counts; total is always the sum of the items."""

    encoder_self: int
    decoder_self: int
    decoder_cross: int
    encoder_projections: int
    decoder_projections: int
    encoder_ffn: int
    decoder_ffn: int

    ITEMS = (
        "encoder_self",
        "decoder_self",
        "decoder_cross",
        "encoder_projections",
        "decoder_projections",
        "encoder_ffn",
        "decoder_ffn",
    )

    @property
    def total(self) -> int:
        return sum(getattr(self, item) for item in self.ITEMS)

    @property
    def decoder_total(self) -> int:
        return self.decoder_self + self.decoder_cross + self.decoder_projections + self.decoder_ffn

    def as_dict(self) -> dict[str, int]:
        out = {item: getattr(self, item) for item in self.ITEMS}
        out["total"] = self.total
        return out


def attn_mults(spec: ArchSpec) -> OpCountReport:
    """Multiplication counts for one architecture point."""
    d = spec.model_dim
    t = spec.target_len
    l = spec.layers
    mem = spec.memory_rows

    encoder_self = 0
    encoder_projections = 0
    encoder_ffn = 0
    for n_i in spec.encoder_lengths:
        encoder_self += n_i * min(spec.attended, n_i) * d
        encoder_projections += 4 * n_i * d * d
        encoder_ffn += 8 * n_i * d * d  # two matmuls at feed-forward width 4d

    decoder_self = l * t * t * d
    decoder_cross = l * t * mem * d
    # self q/k/v/out from t rows; cross q/out from t rows, k/v from the memory
    decoder_projections = l * (4 * t + 2 * t + 2 * mem) * d * d
    decoder_ffn = l * 8 * t * d * d
    return OpCountReport(
        encoder_self=encoder_self,
        decoder_self=decoder_self,
        decoder_cross=decoder_cross,
        encoder_projections=encoder_projections,
        decoder_projections=decoder_projections,
        encoder_ffn=encoder_ffn,
        decoder_ffn=decoder_ffn,
    )


def pyramid_memory(n: int, k: int, m: int, d: int) -> float:
    """Total attention memory across halving layers: sum_i 2^-i * m*n*d.

    Requires n and k to be powers of two with k <= n; the geometric sum is
    checked against its closed form (2 - k/n) * m*n*d before returning.
    """
    for name, value in (("n", n), ("k", k)):
        if value < 1 or value & (value - 1):
            raise ValueError(f"{name}={value} must be a power of two")
    if k > n:
        raise ValueError(f"k={k} exceeds n={n}")
    passes = int(np.log2(n // k))
    unit = float(m) * float(n) * float(d)
    total = sum(2.0**-i * unit for i in range(passes + 1))
    closed = (2.0 - k / n) * unit
    if abs(total - closed) > 1e-12 * max(abs(closed), 1.0):
        raise AssertionError(f"geometric sum {total} disagrees with closed form {closed}")
    return total


def compare(baseline: OpCountReport, variant: OpCountReport) -> dict[str, float]:
    """Per-item and total baseline/variant ratios (inf when the variant is 0)."""
    out: dict[str, float] = {}
    for item in (*OpCountReport.ITEMS, "total", "decoder_total"):
        b = getattr(baseline, item)
        v = getattr(variant, item)
        out[item] = float("inf") if v == 0 else b / v
    return out
