"""Flat ``key = value`` run configuration with dotted section names.

Example::

    # comments start with '#'
    run.seed = 7
    run.lr = 1e-3
    model.preset = desk
    physio.conv_layers = 16x7

Later assignments win; command-line ``--set key=value`` overrides are applied
after the file. Unknown keys are rejected. Model keys left unset fall back to
the chosen ``model.preset``.
"""

from __future__ import annotations

from dataclasses import replace
from pathlib import Path
from typing import Any, Iterable, Optional

from .backbones import BackboneConfig
from .data import DATASET_TAGS, THRESHOLDS
from .errors import ConfigError, IOFailure
from .fusion import MODES, MVPConfig, ModelConfig, desk_config, paper_config, tiny_config
from .train import RunConfig

PRESETS = {"paper": paper_config, "desk": desk_config, "tiny": tiny_config}


def _bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _layers(s: str) -> tuple:
    out = []
    for part in s.split(","):
        c, _, k = part.strip().lower().partition("x")
        out.append((int(c), int(k)))
    return tuple(out)


def _fmt_layers(layers) -> str:
    return ",".join(f"{c}x{k}" for c, k in layers)


def _choice(*options):
    def parse(s: str) -> str:
        s = s.strip()
        if s not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return s

    parse.__name__ = "|".join(options)
    return parse


def _str(s: str) -> str:
    return s.strip()


# key -> (parser, default, help). A default of None means "derived" (see help).
KEYS: dict[str, tuple] = {
    "data.corpus": (_str, None, "corpus manifest (JSON lines); required for train/ablate"),
    "data.out": (_str, "runs", "output directory for checkpoints and reports"),
    "run.seed": (int, 0, "seed for initialization, batch order, dropout and folds"),
    "run.epochs": (int, 30, "maximum epochs per fold"),
    "run.batch_size": (int, 8, "trials per training step"),
    "run.lr": (float, 1e-4, "Adam learning rate"),
    "run.dataset": (_choice(*DATASET_TAGS), "synthetic", "dataset tag; selects default thresholds"),
    "run.threshold_valence": (float, None, "valence binarization threshold (default: per dataset)"),
    "run.threshold_arousal": (float, None, "arousal binarization threshold (default: per dataset)"),
    "run.folds": (int, 5, "cross-validation folds"),
    "run.patience": (int, 5, "epochs without training-loss improvement before stopping"),
    "run.min_delta": (float, 1e-4, "minimum loss decrease counted as improvement"),
    "run.mode": (_choice(*MODES), "fused", "fused | video_only | physio_only"),
    "model.preset": (_choice(*PRESETS), "paper", "base architecture: paper | desk | tiny"),
    "model.n_heads": (int, None, "attention heads (preset)"),
    "model.n_layers": (int, None, "fusion layers (preset)"),
    "model.model_dim": (int, None, "token width, also backbone feature width (preset)"),
    "model.ffn_dim": (int, None, "feed-forward hidden width (preset)"),
    "model.token_count": (int, None, "tokens per modality after time reduction (preset)"),
    "model.use_positional_encoding": (_bool, None, "add sinusoidal positions to both streams (preset)"),
    "model.dropout": (float, None, "dropout on attention weights and FFN during training (preset)"),
    "video.conv_layers": (_layers, None, "video conv stack as WIDTHxKERNEL,... (preset)"),
    "video.input_time_max": (int, 0, "padded video length TV_max; 0 = longest trial in corpus"),
    "physio.conv_layers": (_layers, None, "physio conv stack as WIDTHxKERNEL,... (preset)"),
    "physio.input_time_max": (int, 0, "padded physio length TP_max; 0 = longest trial in corpus"),
}


def keys_help() -> str:
    lines = ["configuration keys (file or --set KEY=VALUE):"]
    for key, (parser, default, text) in KEYS.items():
        shown = "-" if default is None else default
        lines.append(f"  {key:<30} {text} [default: {shown}]")
    return "\n".join(lines)


def parse_value(key: str, raw: Any) -> Any:
    if key not in KEYS:
        raise ConfigError(f"unknown config key {key!r}")
    parser = KEYS[key][0]
    if not isinstance(raw, str):
        if parser is _layers:
            return tuple((int(c), int(k)) for c, k in raw)
        return raw
    try:
        return parser(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {raw!r} ({exc})") from None


def parse_text(text: str, source: str = "<config>") -> dict[str, Any]:
    values: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, _, raw = line.partition("=")
        key = key.strip()
        if key not in KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        values[key] = parse_value(key, raw)
    return values


def load_config(path: Optional[str], overrides: Iterable[str] = ()) -> dict[str, Any]:
    values: dict[str, Any] = {}
    if path:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise IOFailure(f"cannot read config {path}: {exc.strerror}") from exc
        values.update(parse_text(text, str(path)))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key=value")
        key, _, raw = item.partition("=")
        values[key.strip()] = parse_value(key.strip(), raw)
    return values


def resolve(values: dict[str, Any]) -> dict[str, Any]:
    """Fill every key with its explicit value or default (derived keys stay None)."""
    out = {k: spec[1] for k, spec in KEYS.items()}
    for k, v in values.items():
        out[k] = parse_value(k, v)
    return out


def build_run_config(values: dict[str, Any]) -> RunConfig:
    v = resolve(values)
    base: MVPConfig = PRESETS[v["model.preset"]]()
    fusion_kw = {
        name: v[f"model.{name}"]
        for name in ("n_heads", "n_layers", "model_dim", "ffn_dim", "token_count", "use_positional_encoding", "dropout")
        if v[f"model.{name}"] is not None
    }
    fusion: ModelConfig = replace(base.fusion, **fusion_kw)

    def bb(cfg: BackboneConfig, prefix: str) -> BackboneConfig:
        layers = v[f"{prefix}.conv_layers"] or cfg.conv_layers
        if v[f"{prefix}.conv_layers"] is None and layers[-1][0] != fusion.model_dim:
            layers = tuple(layers[:-1]) + ((fusion.model_dim, layers[-1][1]),)
        return BackboneConfig(layers, fusion.model_dim, fusion.token_count, v[f"{prefix}.input_time_max"], cfg.input_channels)

    model = MVPConfig(fusion, bb(base.video, "video"), bb(base.physio, "physio"))
    thr = THRESHOLDS[v["run.dataset"]]
    return RunConfig(
        seed=v["run.seed"],
        epochs=v["run.epochs"],
        batch_size=v["run.batch_size"],
        lr=v["run.lr"],
        dataset_tag=v["run.dataset"],
        threshold_valence=thr if v["run.threshold_valence"] is None else v["run.threshold_valence"],
        threshold_arousal=thr if v["run.threshold_arousal"] is None else v["run.threshold_arousal"],
        folds=v["run.folds"],
        patience=v["run.patience"],
        min_delta=v["run.min_delta"],
        mode=v["run.mode"],
        model=model,
    )


def run_config_to_dict(cfg: RunConfig) -> dict[str, Any]:
    """Fully explicit flat mapping; ``run_config_from_dict`` inverts it exactly."""
    m = cfg.model
    return {
        "run.seed": cfg.seed,
        "run.epochs": cfg.epochs,
        "run.batch_size": cfg.batch_size,
        "run.lr": cfg.lr,
        "run.dataset": cfg.dataset_tag,
        "run.threshold_valence": cfg.threshold_valence,
        "run.threshold_arousal": cfg.threshold_arousal,
        "run.folds": cfg.folds,
        "run.patience": cfg.patience,
        "run.min_delta": cfg.min_delta,
        "run.mode": cfg.mode,
        "model.n_heads": m.fusion.n_heads,
        "model.n_layers": m.fusion.n_layers,
        "model.model_dim": m.fusion.model_dim,
        "model.ffn_dim": m.fusion.ffn_dim,
        "model.token_count": m.fusion.token_count,
        "model.use_positional_encoding": m.fusion.use_positional_encoding,
        "model.dropout": m.fusion.dropout,
        "video.conv_layers": [list(x) for x in m.video.conv_layers],
        "video.input_time_max": m.video.input_time_max,
        "physio.conv_layers": [list(x) for x in m.physio.conv_layers],
        "physio.input_time_max": m.physio.input_time_max,
    }


def run_config_from_dict(d: dict[str, Any]) -> RunConfig:
    return build_run_config(d)


def run_config_text(cfg: RunConfig) -> str:
    lines = []
    for k, val in run_config_to_dict(cfg).items():
        if k.endswith("conv_layers"):
            val = _fmt_layers(val)
        elif isinstance(val, bool):
            val = str(val).lower()
        lines.append(f"{k} = {val}")
    return "\n".join(lines) + "\n"
