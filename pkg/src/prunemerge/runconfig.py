"""Plain-text run configuration: one `key=value` per line.

Blank lines and `#` comments are ignored.  Every key must exist in the
schema — a misspelled key is an error, never a silent default.  CLI flag
overrides pass through the same validation.
"""

from __future__ import annotations

from pathlib import Path

from .errors import ConfigError, ContractError
from .scoring import ScorerVariant
from .vit import ModelConfig


def _int(raw: str) -> int:
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"expected an integer, got {raw!r}") from None


def _float(raw: str) -> float:
    try:
        return float(raw)
    except ValueError:
        raise ConfigError(f"expected a number, got {raw!r}") from None


def _str(raw: str) -> str:
    return raw


def _dataset_kind(raw: str) -> str:
    if raw not in ("synthetic", "idx"):
        raise ConfigError(f"dataset must be 'synthetic' or 'idx', got {raw!r}")
    return raw


def _scorer(raw: str) -> str:
    try:
        ScorerVariant.from_name(raw)
    except ContractError as e:
        raise ConfigError(str(e)) from None
    return raw


def _exempt(raw: str) -> str:
    if raw in ("auto", "none"):
        return raw
    for part in raw.split(","):
        _int(part.strip())
    return raw


# key -> (caster, default).  Defaults are documented values for absent
# keys; they are never applied to unknown or misspelled keys.
SCHEMA: dict[str, tuple] = {
    # model dimensions
    "image_size": (_int, 28),
    "patch_size": (_int, 7),
    "channels": (_int, 1),
    "embed_dim": (_int, 32),
    "depth": (_int, 2),
    "heads": (_int, 2),
    "mlp_ratio": (_int, 4),
    "num_classes": (_int, 10),
    # data source
    "dataset": (_dataset_kind, "synthetic"),
    "data_count": (_int, 512),
    "val_count": (_int, 128),
    "data_seed": (_int, 0),
    "idx_images": (_str, ""),
    "idx_labels": (_str, ""),
    # compression
    "rate": (_float, 0.7),
    "pm_threshold": (_float, 0.1),
    "exempt_layers": (_exempt, "auto"),
    # scoring
    "scorer": (_scorer, "grad_weighted_avg"),
    "iterations": (_int, 8),
    # training
    "epochs": (_int, 5),
    "freeze_epoch": (_int, -1),     # -1: two thirds of epochs, rounded up
    "alpha": (_float, 0.4),
    "temperature": (_float, 1.0),
    "base_lr": (_float, 1e-4),
    "baseline_lr": (_float, 1e-3),
    "weight_decay": (_float, 1e-3),
    "batch_size": (_int, 32),
    "seed": (_int, 0),
}


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse and validate key=value lines; returns only the keys present."""
    values: dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(
                f"{source}:{lineno}: expected key=value, got {stripped!r}")
        key, _, raw = stripped.partition("=")
        key, raw = key.strip(), raw.strip()
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        caster, _ = SCHEMA[key]
        try:
            values[key] = caster(raw)
        except ConfigError as e:
            raise ConfigError(f"{source}:{lineno}: {key}: {e}") from None
    return values


def load_config(path=None, overrides: dict[str, str] | None = None) -> dict:
    """Full configuration: file values (if any), then overrides, then
    schema defaults for everything still absent."""
    values: dict[str, object] = {}
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
        values.update(parse_config_text(text, source=str(path)))
    for key, raw in (overrides or {}).items():
        if key not in SCHEMA:
            raise ConfigError(f"unknown key {key!r}")
        caster, _ = SCHEMA[key]
        values[key] = caster(raw) if isinstance(raw, str) else raw
    for key, (_, default) in SCHEMA.items():
        values.setdefault(key, default)
    return values


def model_config_from(cfg: dict) -> ModelConfig:
    return ModelConfig(
        image_size=cfg["image_size"], patch_size=cfg["patch_size"],
        channels=cfg["channels"], embed_dim=cfg["embed_dim"],
        depth=cfg["depth"], heads=cfg["heads"],
        mlp_ratio=cfg["mlp_ratio"], num_classes=cfg["num_classes"])


def resolve_exempt(value: str, depth: int) -> tuple[int, ...]:
    """Exempt-layer resolution.

    'auto' mirrors the usual practice of sparing the first and last two
    layers, shrinking on shallow models so at least one layer stays
    compressible: first+last two -> first+last -> nothing.
    """
    if value == "none":
        return ()
    if value == "auto":
        for candidate in ({0, 1, depth - 2, depth - 1}, {0, depth - 1}):
            layers = sorted(c for c in candidate if 0 <= c < depth)
            if len(layers) < depth:
                return tuple(layers)
        return ()
    layers = tuple(sorted({int(p.strip()) for p in value.split(",")}))
    for layer in layers:
        if not 0 <= layer < depth:
            raise ConfigError(
                f"exempt layer {layer} outside [0, {depth})")
    return layers


def resolve_freeze_epoch(cfg: dict) -> int:
    """-1 means the conventional two-thirds split (40 of 60 epochs)."""
    if cfg["freeze_epoch"] >= 0:
        return cfg["freeze_epoch"]
    return max(1, -(-2 * cfg["epochs"] // 3))
