"""Flat run configuration: ``key = value`` files plus ``--key value`` overrides."""

from __future__ import annotations

import io
from dataclasses import dataclass
from typing import Any, Callable, Iterable, Optional


class ConfigError(ValueError):
    pass


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _opt_int(s: str) -> Optional[int]:
    return None if s.strip().lower() in ("", "none") else int(s)


def _opt_str(s: str) -> Optional[str]:
    return None if s.strip().lower() in ("", "none") else s


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: Any
    many: bool = False  # takes a whitespace-separated list
    help: str = ""


KEYS: dict[str, Key] = {
    "seed": Key(int, 1234, help="master seed; init/shuffle/dropout derive named sub-streams"),
    # model
    "dim-emb": Key(int, 512),
    "dim-hid": Key(int, 1024),
    "dim-att": Key(_opt_int, None, help="attention layer size (default: dim-hid)"),
    "dim-readout": Key(_opt_int, None, help="readout size (default: dim-emb)"),
    "init-std": Key(float, 0.01),
    # training
    "objective": Key(str, "base", help="base | L1 | L2 | L3"),
    "batch-size": Key(int, 32),
    "max-epochs": Key(int, 10),
    "max-len": Key(int, 50, help="training length filter (words)"),
    "vocab-size": Key(int, 30000),
    "dropout": Key(float, 0.0),
    "clip": Key(float, 1.0),
    "rho": Key(float, 0.95),
    "eps": Key(float, 1e-6),
    "patience": Key(int, 3),
    "pretrain": Key(_opt_str, None),
    "finetune-all": Key(_bool, True),
    "train-src": Key(_opt_str, None),
    "train-tgt": Key(_opt_str, None),
    "valid-src": Key(_opt_str, None),
    "valid-tgt": Key(_opt_str, None),
    "out": Key(str, "run", help="output directory (train) or file prefix (synth)"),
    "overwrite": Key(_bool, False),
    # synthetic data
    "task": Key(_opt_str, None, help="copy | reverse | digit-shift"),
    "n": Key(int, 2000, help="number of synthetic pairs"),
    "valid-n": Key(int, 200, help="held-out synthetic pairs for train --task"),
    "synth-vocab": Key(int, 20, help="synthetic vocabulary size including reserved tokens"),
    "len-min": Key(int, 3),
    "len-max": Key(int, 8),
    # decoding
    "checkpoint": Key(_opt_str, None),
    "ensemble": Key(str, [], many=True),
    "src-vocab": Key(_opt_str, None, help="default: src.vocab next to the checkpoint"),
    "tgt-vocab": Key(_opt_str, None, help="default: tgt.vocab next to the checkpoint"),
    "input": Key(_opt_str, None),
    "output": Key(_opt_str, None, help="default: standard output"),
    "beam": Key(int, 5),
    "vocab-n": Key(_opt_int, None),
    "decode-max-len": Key(_opt_int, None, help="default: 2*|x| + 10"),
    "timing": Key(_opt_str, None, help="timing report path (default: standard error)"),
    "heatmap": Key(_opt_str, None, help="directory for attention heatmaps"),
    # evaluation
    "hyp": Key(_opt_str, None),
    "ref": Key(str, [], many=True),
    "top-n": Key(int, [10, 20, 50, 100, 1000, 5000, 10000], many=True),
    "eval.include-eos": Key(_bool, False),
    # gradcheck
    "tolerance": Key(float, 1e-4),
    "config": Key(_opt_str, None, help="key = value file; command-line values win"),
}


def normalize(name: str) -> str:
    return name.strip().replace("_", "-")


def _convert(name: str, values: list[str]) -> Any:
    if name not in KEYS:
        raise ConfigError(f"unknown configuration key: {name!r}")
    key = KEYS[name]
    try:
        if key.many:
            return [key.parse(v) for v in values]
        if len(values) == 0 and key.parse is _bool:
            return True
        if len(values) != 1:
            raise ConfigError(f"key {name!r} takes exactly one value, got {len(values)}")
        return key.parse(values[0])
    except ConfigError:
        raise
    except ValueError as e:
        raise ConfigError(f"bad value for {name!r}: {e}") from None


def parse_file(text: str) -> dict[str, Any]:
    out = {}
    for lineno, raw in enumerate(io.StringIO(text), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        name, value = line.split("=", 1)
        name = normalize(name)
        out[name] = _convert(name, value.split() if name in KEYS and KEYS[name].many
                             else [value.strip()])
    return out


def parse_overrides(args: Iterable[str]) -> dict[str, Any]:
    """``--key v1 [v2 ...]`` pairs; list keys take every value up to the next flag."""
    out: dict[str, Any] = {}
    name = None
    values: list[str] = []
    for a in list(args) + [None]:
        if a is None or (a.startswith("--") and len(a) > 2):
            if name is not None:
                out[name] = _convert(name, values)
            if a is None:
                break
            name, values = normalize(a[2:]), []
            if name not in KEYS:
                raise ConfigError(f"unknown configuration key: {name!r}")
        elif name is None:
            raise ConfigError(f"unexpected argument {a!r}")
        else:
            values.append(a)
    return out


class RunConfig:
    """Resolved key-value settings with defaults."""

    def __init__(self, values: Optional[dict[str, Any]] = None):
        self.values = {k: (list(v.default) if v.many else v.default) for k, v in KEYS.items()}
        for k, v in (values or {}).items():
            if k not in KEYS:
                raise ConfigError(f"unknown configuration key: {k!r}")
            self.values[k] = v

    @classmethod
    def from_args(cls, args: Iterable[str]) -> "RunConfig":
        cli = parse_overrides(args)
        merged: dict[str, Any] = {}
        if cli.get("config"):
            with io.open(cli["config"], encoding="utf-8") as f:
                merged.update(parse_file(f.read()))
        merged.update(cli)
        return cls(merged)

    def __getitem__(self, name: str) -> Any:
        return self.values[normalize(name)]

    def lines(self) -> list[str]:
        def fmt(v):
            if isinstance(v, list):
                return " ".join(str(x) for x in v)
            return "none" if v is None else str(v)
        return [f"{k} = {fmt(v)}" for k, v in sorted(self.values.items())]
