"""Flat ``key = value`` config files and their mapping onto TrainPlan.

Sections are expressed with dotted keys::

    data.fine = shot10.conll
    data.coarse = coarse.conll, other.conll
    joint.epochs = 30
    matrix.topk = 1

Blank lines and lines starting with ``#`` are ignored.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .corpus import Corpus, read_conll, read_schema
from .f2c import ALL
from .trainer import TrainPlan


class ConfigError(ValueError):
    pass


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _topk(s: str):
    s = s.strip().lower()
    return ALL if s == ALL else int(s)


@dataclass(frozen=True)
class Key:
    field: str | None  # TrainPlan field, None for keys handled elsewhere
    parse: object = str
    doc: str = ""


KEYS: dict[str, Key] = {
    "data.fine": Key(None, str, "fine-grained training corpus (CoNLL)"),
    "data.fine_schema": Key(None, str, "entity-type list for the fine corpora; inferred from data.fine if absent"),
    "data.coarse": Key(None, str, "comma-separated coarse corpora (CoNLL)"),
    "data.dev": Key(None, str, "dev corpus; defaults to a held-out slice of data.fine"),
    "data.test": Key(None, str, "test corpus"),
    "data.pool": Key(None, str, "sampling pool for the kshot suite; defaults to data.fine"),
    "seed": Key("seed", int),
    "mode": Key(None, str, "full | no-filtering | no-coarse"),
    "coarse.epochs": Key("coarse_epochs", int, "epochs for each coarse reannotation model"),
    "fine.epochs": Key("fine_epochs", int, "step-1 fine epochs (also the filtering model)"),
    "joint.epochs": Key("joint_epochs", int),
    "joint.fine_first": Key("fine_first", _bool),
    "joint.reset_optimizer": Key("reset_optimizer", _bool),
    "joint.refilter_every_epoch": Key("refilter_every_epoch", _bool),
    "train.batch_size": Key("batch_size", int),
    "train.lr": Key("lr", float),
    "train.weight_decay": Key("weight_decay", float),
    "train.dev_fraction": Key("dev_fraction", float),
    "train.log_dev": Key("log_dev", _bool),
    "loss.normalize": Key("normalize", str, "tokens | surviving"),
    "matrix.topk": Key("topk", _topk, "integer >= 1 or 'all'"),
    "matrix.learnable": Key("learnable_matrix", _bool),
    "model.vocab_size": Key("vocab_size", int),
    "model.embed_dim": Key("embed_dim", int),
    "model.window": Key("window", int),
    "model.hidden_dim": Key("hidden_dim", int),
    "model.dropout": Key("dropout", float),
}

MODES = ("full", "no-filtering", "no-coarse")


def parse_config(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        out[key] = value
    return out


def load_config(path) -> dict[str, str]:
    path = Path(path)
    return parse_config(path.read_text(encoding="utf-8"), str(path))


def format_config(cfg: dict[str, str]) -> str:
    return "".join(f"{k} = {cfg[k]}\n" for k in sorted(cfg))


def merge(cfg: dict[str, str], overrides: dict[str, str]) -> dict[str, str]:
    for k in overrides:
        if k not in KEYS:
            raise ConfigError(f"unknown key {k!r}")
    return {**cfg, **{k: v for k, v in overrides.items() if v is not None}}


def _resolve(path: str, base: Path) -> Path:
    p = Path(path)
    return p if p.is_absolute() else base / p


PATH_KEYS = ("data.fine", "data.fine_schema", "data.coarse", "data.dev", "data.test", "data.pool")


def absolutize(cfg: dict[str, str], base: Path) -> dict[str, str]:
    """Copy of ``cfg`` with every data path made absolute against ``base``."""
    out = dict(cfg)
    for key in PATH_KEYS:
        if out.get(key):
            parts = [str(_resolve(p.strip(), base).resolve()) for p in out[key].split(",") if p.strip()]
            out[key] = ", ".join(parts)
    return out


def load_corpora(cfg: dict[str, str], base: Path = Path(".")) -> dict[str, object]:
    """Read every corpus the config names. Relative paths resolve against ``base``."""
    if "data.fine" not in cfg:
        raise ConfigError("config needs data.fine")
    schema = read_schema(_resolve(cfg["data.fine_schema"], base)) if cfg.get("data.fine_schema") else None
    fine = read_conll(_resolve(cfg["data.fine"], base), schema, name="fine")
    coarse: list[Corpus] = []
    for p in filter(None, (s.strip() for s in cfg.get("data.coarse", "").split(","))):
        path = _resolve(p, base)
        coarse.append(read_conll(path, name=path.stem))
    dev = read_conll(_resolve(cfg["data.dev"], base), fine.schema, "dev") if cfg.get("data.dev") else None
    test = read_conll(_resolve(cfg["data.test"], base), fine.schema, "test") if cfg.get("data.test") else None
    pool = read_conll(_resolve(cfg["data.pool"], base), fine.schema, "pool") if cfg.get("data.pool") else None
    return {"fine": fine, "coarse": coarse, "dev": dev, "test": test, "pool": pool}


def plan_from_config(cfg: dict[str, str], corpora: dict[str, object]) -> TrainPlan:
    kwargs = {}
    for key, value in cfg.items():
        spec = KEYS[key]
        if spec.field is None:
            continue
        try:
            kwargs[spec.field] = spec.parse(value)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from None
    mode = cfg.get("mode", "full")
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {', '.join(MODES)}, got {mode!r}")
    kwargs["no_filtering"] = mode == "no-filtering"
    kwargs["no_coarse"] = mode == "no-coarse"
    plan = TrainPlan(fine=corpora["fine"], coarse=list(corpora["coarse"]), dev=corpora["dev"],
                     test=corpora["test"], **kwargs)
    try:
        plan.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return plan
