"""Concrete architecture points and their structural validation."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace


class AttentionKind(str, enum.Enum):
    SOFTMAX = "softmax"
    LINEAR = "linear"

    def __str__(self) -> str:  # keep config text round-trippable
        return self.value


class ConfigError(ValueError):
    """An architecture violates structural or search-space invariants."""

    def __init__(self, violations: list[str]):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


@dataclass(frozen=True)
class TaskShape:
    """Model-facing description of a task's input/output interface.

    ``seq2seq`` models embed ``vocab_size`` tokens and emit per-position
    logits; ``classification`` models project ``patch_dim``-wide tokens
    and emit ``n_classes`` logits per sequence.
    """

    kind: str  # "seq2seq" | "classification"
    vocab_size: int = 0
    n_classes: int = 0
    patch_dim: int = 0

    def __post_init__(self):
        if self.kind not in ("seq2seq", "classification"):
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.kind == "seq2seq" and self.vocab_size < 3:
            raise ValueError("seq2seq needs vocab_size >= 3")
        if self.kind == "classification" and (self.n_classes < 2 or self.patch_dim < 1):
            raise ValueError("classification needs n_classes >= 2 and patch_dim >= 1")


@dataclass(frozen=True)
class ArchConfig:
    """One architecture: stack sizes, per-layer widths and attention kinds.

    ``dec_layers == 0`` selects encoder-only (classification) mode.
    ``dec_attn_types`` / ``ende_attn_types`` default to softmax everywhere;
    they are not searched (linear attention in decoders degenerates) but can
    be set explicitly to study that failure mode.
    """

    enc_layers: int
    enc_emb_dim: int
    enc_ffn_dims: tuple[int, ...]
    enc_heads: tuple[int, ...]
    enc_attn_types: tuple[AttentionKind, ...]
    dec_layers: int = 0
    dec_emb_dim: int = 0
    dec_ffn_dims: tuple[int, ...] = ()
    dec_heads: tuple[int, ...] = ()
    ende_heads: tuple[int, ...] = ()
    ende_connect: int = 1
    dec_attn_types: tuple[AttentionKind, ...] | None = None
    ende_attn_types: tuple[AttentionKind, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "enc_ffn_dims", tuple(self.enc_ffn_dims))
        object.__setattr__(self, "enc_heads", tuple(self.enc_heads))
        object.__setattr__(self, "enc_attn_types", tuple(AttentionKind(a) for a in self.enc_attn_types))
        object.__setattr__(self, "dec_ffn_dims", tuple(self.dec_ffn_dims))
        object.__setattr__(self, "dec_heads", tuple(self.dec_heads))
        object.__setattr__(self, "ende_heads", tuple(self.ende_heads))
        if self.dec_attn_types is not None:
            object.__setattr__(
                self, "dec_attn_types", tuple(AttentionKind(a) for a in self.dec_attn_types)
            )
        if self.ende_attn_types is not None:
            object.__setattr__(
                self, "ende_attn_types", tuple(AttentionKind(a) for a in self.ende_attn_types)
            )

    # -- validation ---------------------------------------------------------

    def violations(self) -> list[str]:
        v: list[str] = []
        if self.enc_layers < 1:
            v.append(f"enc_layers must be >= 1, got {self.enc_layers}")
        if self.enc_emb_dim < 1:
            v.append(f"enc_emb_dim must be positive, got {self.enc_emb_dim}")
        for name, seq in (
            ("enc_ffn_dims", self.enc_ffn_dims),
            ("enc_heads", self.enc_heads),
            ("enc_attn_types", self.enc_attn_types),
        ):
            if len(seq) != self.enc_layers:
                v.append(f"{name} has {len(seq)} entries for {self.enc_layers} encoder layers")
        for h in self.enc_heads:
            if h < 1 or self.enc_emb_dim % h != 0:
                v.append(f"enc_emb_dim {self.enc_emb_dim} not divisible by head count {h}")
        if self.dec_layers < 0:
            v.append(f"dec_layers must be >= 0, got {self.dec_layers}")
        if self.dec_layers == 0:
            for name, seq in (
                ("dec_ffn_dims", self.dec_ffn_dims),
                ("dec_heads", self.dec_heads),
                ("ende_heads", self.ende_heads),
            ):
                if seq:
                    v.append(f"{name} given but dec_layers == 0")
        else:
            if self.dec_emb_dim < 1:
                v.append(f"dec_emb_dim must be positive, got {self.dec_emb_dim}")
            for name, seq in (
                ("dec_ffn_dims", self.dec_ffn_dims),
                ("dec_heads", self.dec_heads),
                ("ende_heads", self.ende_heads),
            ):
                if len(seq) != self.dec_layers:
                    v.append(f"{name} has {len(seq)} entries for {self.dec_layers} decoder layers")
            for h in list(self.dec_heads) + list(self.ende_heads):
                if h < 1 or self.dec_emb_dim % h != 0:
                    v.append(f"dec_emb_dim {self.dec_emb_dim} not divisible by head count {h}")
            if not (1 <= self.ende_connect <= self.enc_layers):
                v.append(
                    f"ende_connect {self.ende_connect} outside [1, enc_layers={self.enc_layers}]"
                )
            if self.dec_attn_types is not None and len(self.dec_attn_types) != self.dec_layers:
                v.append("dec_attn_types length mismatch")
            if self.ende_attn_types is not None and len(self.ende_attn_types) != self.dec_layers:
                v.append("ende_attn_types length mismatch")
        return v

    def validate(self) -> "ArchConfig":
        v = self.violations()
        if v:
            raise ConfigError(v)
        return self

    # -- attention overrides --------------------------------------------------

    def resolved_dec_attn_types(self) -> tuple[AttentionKind, ...]:
        if self.dec_attn_types is not None:
            return self.dec_attn_types
        return tuple(AttentionKind.SOFTMAX for _ in range(self.dec_layers))

    def resolved_ende_attn_types(self) -> tuple[AttentionKind, ...]:
        if self.ende_attn_types is not None:
            return self.ende_attn_types
        return tuple(AttentionKind.SOFTMAX for _ in range(self.dec_layers))

    def with_attention_override(self, mode: str) -> "ArchConfig":
        """Return a copy with attention kinds overridden.

        ``as-is`` keeps the config; ``all-softmax`` / ``all-linear`` replace
        every attention kind, including decoder self and cross attention.
        """
        if mode == "as-is":
            return self
        if mode not in ("all-softmax", "all-linear"):
            raise ValueError(f"unknown attention override {mode!r}")
        kind = AttentionKind.SOFTMAX if mode == "all-softmax" else AttentionKind.LINEAR
        dec = tuple(kind for _ in range(self.dec_layers)) if self.dec_layers else None
        return replace(
            self,
            enc_attn_types=tuple(kind for _ in range(self.enc_layers)),
            dec_attn_types=dec,
            ende_attn_types=dec,
        )

    # -- canonical text form ---------------------------------------------------

    def to_text(self) -> str:
        """Canonical flat key=value serialization (one line per field)."""
        lines = [
            f"enc_layers = {self.enc_layers}",
            f"enc_emb_dim = {self.enc_emb_dim}",
            f"enc_ffn_dims = {','.join(map(str, self.enc_ffn_dims))}",
            f"enc_heads = {','.join(map(str, self.enc_heads))}",
            f"enc_attn_types = {','.join(str(a) for a in self.enc_attn_types)}",
            f"dec_layers = {self.dec_layers}",
        ]
        if self.dec_layers:
            lines += [
                f"dec_emb_dim = {self.dec_emb_dim}",
                f"dec_ffn_dims = {','.join(map(str, self.dec_ffn_dims))}",
                f"dec_heads = {','.join(map(str, self.dec_heads))}",
                f"ende_heads = {','.join(map(str, self.ende_heads))}",
                f"ende_connect = {self.ende_connect}",
            ]
            if self.dec_attn_types is not None:
                lines.append(f"dec_attn_types = {','.join(str(a) for a in self.dec_attn_types)}")
            if self.ende_attn_types is not None:
                lines.append(f"ende_attn_types = {','.join(str(a) for a in self.ende_attn_types)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ArchConfig":
        fields: dict[str, str] = {}
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError([f"bad config line: {raw!r}"])
            key, val = (part.strip() for part in line.split("=", 1))
            fields[key] = val

        def ints(key, default=()):
            if key not in fields or not fields[key]:
                return tuple(default)
            return tuple(int(x) for x in fields[key].split(","))

        def kinds(key):
            if key not in fields or not fields[key]:
                return None
            return tuple(AttentionKind(x.strip()) for x in fields[key].split(","))

        try:
            cfg = cls(
                enc_layers=int(fields["enc_layers"]),
                enc_emb_dim=int(fields["enc_emb_dim"]),
                enc_ffn_dims=ints("enc_ffn_dims"),
                enc_heads=ints("enc_heads"),
                enc_attn_types=kinds("enc_attn_types") or (),
                dec_layers=int(fields.get("dec_layers", "0")),
                dec_emb_dim=int(fields.get("dec_emb_dim", "0")),
                dec_ffn_dims=ints("dec_ffn_dims"),
                dec_heads=ints("dec_heads"),
                ende_heads=ints("ende_heads"),
                ende_connect=int(fields.get("ende_connect", "1")),
                dec_attn_types=kinds("dec_attn_types"),
                ende_attn_types=kinds("ende_attn_types"),
            )
        except (KeyError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError([f"cannot parse config text: {exc}"]) from exc
        return cfg
