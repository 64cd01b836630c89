"""Discrete architecture search spaces.

A space is an ordered list of named features, each either global or
per-layer (per-layer features resolve their slot count against a named
layer-count feature). Head-count features declare which embedding
feature they must divide; the sampler masks non-divisible values instead
of shrinking the declared domains, so the space stays exactly as
published while every emitted config is valid.

Feature vectors are one-hot per feature value, with per-layer features
flattened over the maximum layer count and absent layers all-zero, so the
vector length depends only on the space.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .config import ArchConfig, AttentionKind, ConfigError

GLOBAL = "global"
PER_LAYER = "per-layer"

# feature names the config builder understands
KNOWN_FEATURES = (
    "enc_layers",
    "enc_emb_dim",
    "enc_ffn_dim",
    "enc_heads",
    "enc_attn_type",
    "dec_layers",
    "dec_emb_dim",
    "dec_ffn_dim",
    "dec_heads",
    "ende_heads",
    "ende_connect",
)


class DecodeError(ValueError):
    """A feature vector is not a well-formed encoding for this space."""


@dataclass(frozen=True)
class Feature:
    name: str
    scope: str
    domain: tuple
    layer_feature: str | None = None  # per-layer: which feature gives the slot count
    divides: str | None = None  # head counts must divide this embedding feature

    def __post_init__(self):
        object.__setattr__(self, "domain", tuple(self.domain))
        if not self.domain:
            raise ValueError(f"feature {self.name}: empty domain")
        if self.scope not in (GLOBAL, PER_LAYER):
            raise ValueError(f"feature {self.name}: bad scope {self.scope}")
        if self.scope == PER_LAYER and not self.layer_feature:
            raise ValueError(f"feature {self.name}: per-layer needs a layer feature")


class SearchSpace:
    """Ordered feature declarations plus optional frozen (pruned) features.

    Frozen features keep their declared domains for encoding purposes but
    always sample/mutate to the frozen assignment, so pruning never
    changes feature-vector layout.
    """

    def __init__(self, features: list[Feature], frozen: dict | None = None):
        self.features: tuple[Feature, ...] = tuple(features)
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise ValueError("duplicate feature names")
        self._by_name = {f.name: f for f in self.features}
        for f in self.features:
            if f.name not in KNOWN_FEATURES:
                raise ValueError(f"unknown feature {f.name!r}; known: {KNOWN_FEATURES}")
            if f.layer_feature is not None:
                if f.layer_feature not in self._by_name:
                    raise ValueError(f"{f.name}: layer feature {f.layer_feature} not declared")
                if names.index(f.layer_feature) > names.index(f.name):
                    raise ValueError(f"{f.name}: layer feature must be declared first")
            if f.divides is not None and f.divides not in self._by_name:
                raise ValueError(f"{f.name}: divides target {f.divides} not declared")
        self.frozen: dict = dict(frozen or {})

    # -- introspection -------------------------------------------------------

    def __getitem__(self, name: str) -> Feature:
        return self._by_name[name]

    def __contains__(self, name: str) -> bool:
        return name in self._by_name

    def max_layers(self, feature: Feature) -> int:
        layer_dom = self._by_name[feature.layer_feature].domain
        return int(max(layer_dom))

    def feature_slots(self, feature: Feature) -> int:
        return 1 if feature.scope == GLOBAL else self.max_layers(feature)

    def vector_length(self) -> int:
        return sum(self.feature_slots(f) * len(f.domain) for f in self.features)

    def feature_columns(self) -> dict[str, slice]:
        """Column range of each feature inside the encoded vector."""
        cols, at = {}, 0
        for f in self.features:
            width = self.feature_slots(f) * len(f.domain)
            cols[f.name] = slice(at, at + width)
            at += width
        return cols

    def maximal_assignment(self) -> dict:
        """Largest value of every feature (used to size supernet weights)."""
        out = {}
        for f in self.features:
            dom = f.domain
            big = max(dom) if all(isinstance(v, (int, float)) for v in dom) else dom[0]
            if f.scope == GLOBAL:
                out[f.name] = big
            else:
                out[f.name] = tuple(big for _ in range(self.max_layers(f)))
        return out

    # -- config <-> assignment -----------------------------------------------

    def _assignment_to_config(self, a: dict) -> ArchConfig:
        enc_layers = int(a["enc_layers"])
        dec_layers = int(a.get("dec_layers", 0))
        kw = dict(
            enc_layers=enc_layers,
            enc_emb_dim=int(a["enc_emb_dim"]),
            enc_ffn_dims=tuple(a["enc_ffn_dim"])[:enc_layers],
            enc_heads=tuple(a["enc_heads"])[:enc_layers],
            enc_attn_types=tuple(AttentionKind(v) for v in a["enc_attn_type"])[:enc_layers],
            dec_layers=dec_layers,
        )
        if dec_layers:
            kw.update(
                dec_emb_dim=int(a["dec_emb_dim"]),
                dec_ffn_dims=tuple(a["dec_ffn_dim"])[:dec_layers],
                dec_heads=tuple(a["dec_heads"])[:dec_layers],
                ende_heads=tuple(a["ende_heads"])[:dec_layers],
                ende_connect=int(a.get("ende_connect", 1)),
            )
        return ArchConfig(**kw)

    def _config_to_assignment(self, cfg: ArchConfig) -> dict:
        mapping = {
            "enc_layers": cfg.enc_layers,
            "enc_emb_dim": cfg.enc_emb_dim,
            "enc_ffn_dim": cfg.enc_ffn_dims,
            "enc_heads": cfg.enc_heads,
            "enc_attn_type": tuple(str(x) for x in cfg.enc_attn_types),
            "dec_layers": cfg.dec_layers,
            "dec_emb_dim": cfg.dec_emb_dim,
            "dec_ffn_dim": cfg.dec_ffn_dims,
            "dec_heads": cfg.dec_heads,
            "ende_heads": cfg.ende_heads,
            "ende_connect": cfg.ende_connect,
        }
        return {f.name: mapping[f.name] for f in self.features}

    def _layer_count(self, a: dict, feature: Feature) -> int:
        return int(a[feature.layer_feature])

    def _valid_values(self, feature: Feature, a: dict) -> tuple:
        if feature.divides is None:
            return feature.domain
        emb = int(a[feature.divides])
        valid = tuple(v for v in feature.domain if emb % int(v) == 0)
        if not valid:
            raise ConfigError(
                [f"no value of {feature.name} divides {feature.divides}={emb}"]
            )
        return valid

    # -- operations -----------------------------------------------------------

    def validate_config(self, cfg: ArchConfig) -> ArchConfig:
        """Structural invariants plus membership of every value in its domain."""
        violations = cfg.violations()
        a = self._config_to_assignment(cfg)
        for f in self.features:
            val = a[f.name]
            if f.scope == GLOBAL:
                if val not in f.domain:
                    violations.append(f"{f.name}={val} outside domain {f.domain}")
            else:
                count = self._layer_count(a, f)
                if len(val) != count:
                    violations.append(f"{f.name} needs {count} per-layer values, got {len(val)}")
                for v in val:
                    if v not in f.domain:
                        violations.append(f"{f.name} value {v} outside domain {f.domain}")
        for name, frozen_val in self.frozen.items():
            f = self._by_name[name]
            if f.scope == GLOBAL:
                if a[name] != frozen_val:
                    violations.append(f"{name} frozen to {frozen_val}, got {a[name]}")
            else:
                want = self._frozen_slots(f, self._layer_count(a, f))
                if tuple(a[name]) != want:
                    violations.append(f"{name} frozen to {want}, got {tuple(a[name])}")
        if violations:
            raise ConfigError(violations)
        return cfg

    def _frozen_slots(self, feature: Feature, count: int) -> tuple:
        vals = self.frozen[feature.name]
        vals = tuple(vals) if isinstance(vals, (list, tuple)) else (vals,)
        if len(vals) >= count:
            return vals[:count]
        # best-seen config had fewer layers: repeat its last per-layer value
        return vals + tuple(vals[-1] for _ in range(count - len(vals)))

    def sample(self, rng: np.random.Generator) -> ArchConfig:
        a: dict = {}
        for f in self.features:
            if f.scope == GLOBAL:
                if f.name in self.frozen:
                    a[f.name] = self.frozen[f.name]
                else:
                    a[f.name] = f.domain[int(rng.integers(len(f.domain)))]
        for f in self.features:
            if f.scope != PER_LAYER:
                continue
            count = self._layer_count(a, f)
            if f.name in self.frozen:
                a[f.name] = self._frozen_slots(f, count)
            else:
                valid = self._valid_values(f, a)
                a[f.name] = tuple(valid[int(rng.integers(len(valid)))] for _ in range(count))
        return self._assignment_to_config(a).validate()

    def mutate(self, cfg: ArchConfig, rng: np.random.Generator, rate: float) -> ArchConfig:
        """Flip each feature slot to another domain value with probability rate.

        Validity is repaired afterwards: layer-count changes resize their
        per-layer lists (new slots sampled), and head values that no longer
        divide their embedding are resampled from the valid subset.
        """
        a = self._config_to_assignment(cfg)

        def other(domain, current):
            options = [v for v in domain if v != current]
            if not options:
                return current
            return options[int(rng.integers(len(options)))]

        for f in self.features:
            if f.name in self.frozen:
                continue
            if f.scope == GLOBAL:
                if rng.random() < rate:
                    a[f.name] = other(f.domain, a[f.name])
            else:
                vals = list(a[f.name])
                for i in range(len(vals)):
                    if rng.random() < rate:
                        vals[i] = other(f.domain, vals[i])
                a[f.name] = tuple(vals)

        # repair: per-layer list lengths follow their (possibly mutated) layer count
        for f in self.features:
            if f.scope != PER_LAYER:
                continue
            count = self._layer_count(a, f)
            vals = list(a[f.name])[:count]
            if f.name in self.frozen:
                a[f.name] = self._frozen_slots(f, count)
                continue
            valid = self._valid_values(f, a)
            while len(vals) < count:
                vals.append(valid[int(rng.integers(len(valid)))])
            for i, v in enumerate(vals):
                if v not in valid:
                    vals[i] = valid[int(rng.integers(len(valid)))]
            a[f.name] = tuple(vals)
        return self._assignment_to_config(a).validate()

    def encode(self, cfg: ArchConfig) -> np.ndarray:
        a = self._config_to_assignment(cfg)
        chunks = []
        for f in self.features:
            block = np.zeros((self.feature_slots(f), len(f.domain)))
            if f.scope == GLOBAL:
                block[0, f.domain.index(a[f.name])] = 1.0
            else:
                for i, v in enumerate(a[f.name]):
                    block[i, f.domain.index(v)] = 1.0
            chunks.append(block.reshape(-1))
        return np.concatenate(chunks)

    def decode(self, vec: np.ndarray) -> ArchConfig:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.vector_length(),):
            raise DecodeError(f"expected length {self.vector_length()}, got {vec.shape}")
        a: dict = {}
        at = 0
        for f in self.features:
            slots = self.feature_slots(f)
            width = len(f.domain)
            block = vec[at : at + slots * width].reshape(slots, width)
            at += slots * width
            if f.scope == GLOBAL:
                a[f.name] = f.domain[self._one_hot_index(block[0], f.name)]
            else:
                count = self._layer_count(a, f)
                vals = []
                for i in range(slots):
                    if i < count:
                        vals.append(f.domain[self._one_hot_index(block[i], f.name)])
                    elif block[i].any():
                        raise DecodeError(f"{f.name}: non-zero encoding past layer {count}")
                a[f.name] = tuple(vals)
        cfg = self._assignment_to_config(a)
        try:
            return self.validate_config(cfg)
        except ConfigError as exc:
            raise DecodeError(f"decoded config invalid: {exc}") from exc

    @staticmethod
    def _one_hot_index(row: np.ndarray, name: str) -> int:
        hits = np.nonzero(row == 1.0)[0]
        if len(hits) != 1 or row.sum() != 1.0:
            raise DecodeError(f"{name}: block is not one-hot: {row}")
        return int(hits[0])

    def enumerable_size(self) -> int:
        """Exact number of valid configurations (respecting frozen features)."""
        structural = [
            f
            for f in self.features
            if f.scope == GLOBAL
            and (
                any(g.layer_feature == f.name for g in self.features)
                or any(g.divides == f.name for g in self.features)
            )
        ]
        loose_globals = [f for f in self.features if f.scope == GLOBAL and f not in structural]

        def choices(f: Feature):
            if f.name in self.frozen:
                return (self.frozen[f.name],)
            return f.domain

        total = 0
        for combo in itertools.product(*(choices(f) for f in structural)):
            a = {f.name: v for f, v in zip(structural, combo)}
            count = 1
            for f in loose_globals:
                count *= len(choices(f))
            for f in self.features:
                if f.scope != PER_LAYER:
                    continue
                layers = self._layer_count(a, f)
                per_slot = 1 if f.name in self.frozen else len(self._valid_values(f, a))
                count *= per_slot**layers
            total += count
        return total

    # -- pruning ---------------------------------------------------------------

    def freeze(self, assignments: dict) -> "SearchSpace":
        for name in assignments:
            if name not in self._by_name:
                raise ValueError(f"cannot freeze unknown feature {name}")
        merged = dict(self.frozen)
        merged.update(assignments)
        return SearchSpace(list(self.features), frozen=merged)

    # -- text form ---------------------------------------------------------------

    def to_text(self) -> str:
        lines = ["# feature  scope  domain  [divides=<feature>]"]
        for f in self.features:
            scope = GLOBAL if f.scope == GLOBAL else f"{PER_LAYER}:{f.layer_feature}"
            parts = [f.name, scope, ",".join(str(v) for v in f.domain)]
            if f.divides:
                parts.append(f"divides={f.divides}")
            lines.append("  ".join(parts))
        for name, val in self.frozen.items():
            sval = ",".join(str(v) for v in val) if isinstance(val, (tuple, list)) else str(val)
            lines.append(f"frozen {name} {sval}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "SearchSpace":
        features: list[Feature] = []
        frozen: dict = {}
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if parts[0] == "frozen":
                if len(parts) != 3:
                    raise ValueError(f"bad frozen line: {raw!r}")
                vals = tuple(_parse_value(v) for v in parts[2].split(","))
                frozen[parts[1]] = vals if len(vals) > 1 else vals[0]
                continue
            if len(parts) < 3:
                raise ValueError(f"bad feature line: {raw!r}")
            name, scope_spec, domain_spec = parts[0], parts[1], parts[2]
            divides = None
            for extra in parts[3:]:
                if extra.startswith("divides="):
                    divides = extra.split("=", 1)[1]
                else:
                    raise ValueError(f"bad feature option {extra!r}")
            if scope_spec == GLOBAL:
                scope, layer_feature = GLOBAL, None
            elif scope_spec.startswith(f"{PER_LAYER}:"):
                scope, layer_feature = PER_LAYER, scope_spec.split(":", 1)[1]
            else:
                raise ValueError(f"bad scope {scope_spec!r}")
            domain = tuple(_parse_value(v) for v in domain_spec.split(","))
            features.append(Feature(name, scope, domain, layer_feature, divides))
        return cls(features, frozen=frozen)

    @classmethod
    def from_file(cls, path) -> "SearchSpace":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_text(fh.read())


def _parse_value(text: str):
    try:
        return int(text)
    except ValueError:
        return text


def translation_space() -> SearchSpace:
    """Primitive + attention-type features for the translation benchmark.

    Decoder self and cross attention kinds are deliberately not searched:
    linear attention in decoder layers converges badly (see the model
    module's degeneracy switch).
    """
    ffn = (2048, 3072, 4096, 5120)
    heads = (4, 8, 16)
    return SearchSpace(
        [
            Feature("enc_layers", GLOBAL, (6,)),
            Feature("enc_emb_dim", GLOBAL, (768, 1024)),
            Feature("enc_ffn_dim", PER_LAYER, ffn, layer_feature="enc_layers"),
            Feature("enc_heads", PER_LAYER, heads, layer_feature="enc_layers", divides="enc_emb_dim"),
            Feature("enc_attn_type", PER_LAYER, ("softmax", "linear"), layer_feature="enc_layers"),
            Feature("dec_layers", GLOBAL, (1, 2, 3, 4, 5, 6)),
            Feature("dec_emb_dim", GLOBAL, (768, 1024)),
            Feature("dec_ffn_dim", PER_LAYER, ffn, layer_feature="dec_layers"),
            Feature("dec_heads", PER_LAYER, heads, layer_feature="dec_layers", divides="dec_emb_dim"),
            Feature("ende_heads", PER_LAYER, heads, layer_feature="dec_layers", divides="dec_emb_dim"),
            Feature("ende_connect", GLOBAL, (1, 2, 3)),
        ]
    )


def classification_space() -> SearchSpace:
    """Encoder-only space for image classification."""
    return SearchSpace(
        [
            Feature("enc_layers", GLOBAL, (12, 13, 14)),
            Feature("enc_emb_dim", GLOBAL, (320, 384, 448)),
            Feature("enc_ffn_dim", PER_LAYER, (672, 896, 1344, 1568, 1792), layer_feature="enc_layers"),
            Feature("enc_heads", PER_LAYER, (5, 6, 7), layer_feature="enc_layers", divides="enc_emb_dim"),
            Feature("enc_attn_type", PER_LAYER, ("softmax", "linear"), layer_feature="enc_layers"),
        ]
    )


def toy_space() -> SearchSpace:
    """Tiny enumerable space (16 configs) used by search-correctness oracles."""
    return SearchSpace(
        [
            Feature("enc_layers", GLOBAL, (1,)),
            Feature("enc_emb_dim", GLOBAL, (16, 32)),
            Feature("enc_ffn_dim", PER_LAYER, (32, 64), layer_feature="enc_layers"),
            Feature("enc_heads", PER_LAYER, (2, 4), layer_feature="enc_layers", divides="enc_emb_dim"),
            Feature("enc_attn_type", PER_LAYER, ("softmax", "linear"), layer_feature="enc_layers"),
        ]
    )


SPACES = {
    "translation": translation_space,
    "classification": classification_space,
    "toy": toy_space,
}


def get_space(name: str) -> SearchSpace:
    try:
        return SPACES[name]()
    except KeyError:
        raise ValueError(f"unknown space {name!r}; available: {sorted(SPACES)}") from None
