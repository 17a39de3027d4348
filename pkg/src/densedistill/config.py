"""Run configuration: flat ``key = value`` files with strict validation.

Every key has a default; unknown keys, unparsable values, duplicate keys,
and range violations are all rejected at parse time. ``echo_config``
serializes a config so that parse(echo(cfg)) == cfg.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

from .errors import ConfigError


@dataclass
class RunConfig:
    """Distillation hyperparameters plus run paths."""
    lam: float = 0.25            # context loss weight (config key: lambda)
    tau: float = 1.0
    grid_lo: int = 1
    grid_hi: int = 6
    roi_n: int = 4
    lr: float = 1e-5
    weight_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 6
    batch_size: int = 2
    seed: int = 0
    dtype: str = "f64"
    student_patch: int = 16
    student_res: int = 560
    student_depth: int = 4
    student_width: int = 64
    student_heads: int = 4
    embed_dim: int = 32          # 0 disables the V-L projection
    vfm_patch: int = 14
    vfm_res: int = 490
    vfm_depth: int = 3
    vfm_width: int = 48
    vfm_heads: int = 4
    student_pixel_mean: float = 0.5
    student_pixel_std: float = 0.5
    vfm_pixel_mean: float = 0.45
    vfm_pixel_std: float = 0.27
    trainable_layers: int = -1   # -1 = all blocks
    sd_maps: int = 3
    sd_sharpness: float = 4.0
    sd_noise: float = 0.5
    use_sd_completion: bool = True
    manifest: str = "manifest.txt"
    checkpoint_dir: str = "checkpoints"
    report_dir: str = "reports"
    resume: str = ""


# config keys differ from field names only for the reserved word
_KEY_TO_FIELD = {"lambda": "lam"}
_FIELD_TO_KEY = {v: k for k, v in _KEY_TO_FIELD.items()}
_FIELDS = {f.name: f.type for f in fields(RunConfig)}


def _field_for(key):
    name = _KEY_TO_FIELD.get(key, key)
    if name not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    return name


def _parse_value(key, name, raw):
    kind = _FIELDS[name]
    try:
        if kind == "bool":
            if raw.lower() not in ("true", "false"):
                raise ValueError
            return raw.lower() == "true"
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"cannot parse value {raw!r} for key {key!r} as {kind}") from None


def validate(cfg):
    def need(cond, msg):
        if not cond:
            raise ConfigError(msg)

    need(cfg.lam >= 0, f"lambda must be >= 0, got {cfg.lam}")
    need(cfg.tau > 0, f"tau must be > 0, got {cfg.tau}")
    need(1 <= cfg.grid_lo <= cfg.grid_hi, f"invalid grid range [{cfg.grid_lo}, {cfg.grid_hi}]")
    need(cfg.roi_n >= 1, "roi_n must be >= 1")
    need(cfg.lr > 0, f"lr must be > 0, got {cfg.lr}")
    need(cfg.weight_decay >= 0, "weight_decay must be >= 0")
    need(0 < cfg.beta1 < 1 and 0 < cfg.beta2 < 1, "betas must lie in (0, 1)")
    need(cfg.eps > 0, "eps must be > 0")
    need(cfg.epochs >= 0, "epochs must be >= 0")
    need(cfg.batch_size >= 1, "batch_size must be >= 1")
    need(cfg.dtype in ("f32", "f64"), f"dtype must be f32 or f64, got {cfg.dtype!r}")
    for role in ("student", "vfm"):
        patch = getattr(cfg, f"{role}_patch")
        res = getattr(cfg, f"{role}_res")
        width = getattr(cfg, f"{role}_width")
        heads = getattr(cfg, f"{role}_heads")
        depth = getattr(cfg, f"{role}_depth")
        need(patch >= 1 and res >= patch, f"{role} patch/resolution invalid")
        need(res % patch == 0, f"{role} resolution {res} not divisible by patch {patch}")
        need(depth >= 1, f"{role} depth must be >= 1")
        need(width >= 1 and heads >= 1 and width % heads == 0,
             f"{role} width {width} not divisible by heads {heads}")
        need(getattr(cfg, f"{role}_pixel_std") > 0, f"{role} pixel std must be > 0")
    need(cfg.embed_dim >= 0, "embed_dim must be >= 0")
    s_tokens = (cfg.student_res // cfg.student_patch) ** 2
    v_tokens = (cfg.vfm_res // cfg.vfm_patch) ** 2
    need(s_tokens == v_tokens,
         f"token counts differ: student {s_tokens} vs provider {v_tokens}")
    need(cfg.trainable_layers == -1 or 0 <= cfg.trainable_layers <= cfg.student_depth,
         f"trainable_layers {cfg.trainable_layers} outside -1 or [0, {cfg.student_depth}]")
    need(cfg.sd_maps >= 1, "sd_maps must be >= 1")
    need(cfg.sd_sharpness >= 0, "sd_sharpness must be >= 0")
    need(cfg.sd_noise >= 0, "sd_noise must be >= 0")
    return cfg


def parse_config_text(text):
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        name = _field_for(key)
        if name in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[name] = _parse_value(key, name, raw)
    return validate(RunConfig(**values))


def parse_config(path):
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def echo_config(cfg):
    lines = []
    for f in fields(RunConfig):
        key = _FIELD_TO_KEY.get(f.name, f.name)
        value = getattr(cfg, f.name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
