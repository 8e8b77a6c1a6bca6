"""Run configuration: INI file with fixed sections, typed keys and defaults.

Unknown sections or keys are rejected. ``None`` defaults mean "derive
automatically" (e.g. from the mesh type) and are written as empty values.
"""
from __future__ import annotations

import configparser
from pathlib import Path

from .errors import ConfigError
from .gcn import ModelConfig
from .losses import MESH_TYPES, BnfParams, LossWeights
from .pipeline import AugmentationConfig, TrainConfig
from .preprocess import PreprocessConfig, SmoothConfig
from .remesh import RemeshConfig
from .refine import default_mu

ARCHS = ("sgcn", "mgcn")

# section -> key -> (type, default)
SCHEMA = {
    "run": {
        "input": (str, None),
        "gt": (str, None),
        "output": (str, "out"),
        "mesh_type": (str, "noncad"),
        "arch": (str, "sgcn"),
        "seed": (int, 0),
        "name": (str, None),
    },
    "remesh": {
        "iterations": (int, 5),
        "target_edge_length": (float, None),
        "feature_angle": (float, 45.0),
        "relax_steps": (int, 1),
    },
    "smooth": {"steps": (int, 30)},
    "augment": {"p": (float, 0.014), "k": (int, 4), "mask_sets": (int, 40)},
    "model": {
        "width": (int, 32),
        "order": (int, 3),
        "slope": (float, 0.01),
        "bn_eps": (float, 1e-5),
        "bn_momentum": (float, 0.1),
        "head_gain": (float, 0.1),
        "levels": (int, 3),
        "sgcn_blocks": (int, 13),
        "convs_per_block": (int, 5),
    },
    "train": {
        "steps": (int, 100),
        "lr": (float, 0.01),
        "beta1": (float, 0.9),
        "beta2": (float, 0.999),
        "halve_every": (int, 50),
        "w_pos": (str, None),
        "w_nrm": (float, None),
        "w_reg": (float, None),
    },
    "bnf": {"iterations": (int, 5), "sigma_c": (float, None), "sigma_s": (float, 0.3)},
    "refine": {
        "mu": (float, None),
        "tolerance": (float, 1e-10),
        "max_residual": (float, 1e-8),
        "method": (str, "cg"),
        "target": (str, "mix"),
    },
    "metrics": {"vertex_distance": (bool, False)},
}


def _parse(kind, text, where):
    text = text.strip()
    if text == "":
        return None
    try:
        if kind is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        return kind(text)
    except ValueError:
        raise ConfigError(f"{where}: cannot read {text!r} as {kind.__name__}") from None


class RunConfig:
    """Typed view of the configuration; ``cfg["train"]["steps"]`` style access."""

    def __init__(self, values: dict | None = None):
        self.values = {sec: {k: d for k, (_, d) in keys.items()} for sec, keys in SCHEMA.items()}
        for sec, keys in (values or {}).items():
            for k, v in keys.items():
                self.set(sec, k, v)

    def __getitem__(self, section):
        return self.values[section]

    def set(self, section: str, key: str, value) -> None:
        if section not in SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        if key not in SCHEMA[section]:
            raise ConfigError(f"unknown key {key!r} in section [{section}]")
        kind = SCHEMA[section][key][0]
        if isinstance(value, str) and kind is not str:
            value = _parse(kind, value, f"[{section}] {key}")
        elif value is not None and kind is float:
            value = float(value)
        self.values[section][key] = value

    # -- file round trip -----------------------------------------------------
    @classmethod
    def load(cls, path) -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        cfg = cls()
        for sec in parser.sections():
            for key, text in parser.items(sec):
                if sec in SCHEMA and key in SCHEMA[sec] and SCHEMA[sec][key][0] is str:
                    cfg.set(sec, key, text.strip() or None)
                else:
                    cfg.set(sec, key, text)
        return cfg

    def dumps(self) -> str:
        lines = []
        for sec, keys in self.values.items():
            lines.append(f"[{sec}]")
            for k, v in keys.items():
                if v is None:
                    text = ""
                elif isinstance(v, float):
                    text = repr(v)
                elif isinstance(v, bool):
                    text = "true" if v else "false"
                else:
                    text = str(v)
                lines.append(f"{k} = {text}".rstrip())
            lines.append("")
        return "\n".join(lines)

    def write(self, path) -> None:
        Path(path).write_text(self.dumps())

    # -- validation and module configs --------------------------------------
    def validate(self, need_input: bool = False) -> None:
        run = self["run"]
        if run["arch"] not in ARCHS:
            raise ConfigError(f"arch must be one of {ARCHS}, got {run['arch']!r}")
        if run["mesh_type"] not in MESH_TYPES:
            raise ConfigError(f"mesh type must be one of {MESH_TYPES}, got {run['mesh_type']!r}")
        if self["refine"]["method"] not in ("cg", "direct"):
            raise ConfigError("refine method must be 'cg' or 'direct'")
        if self["refine"]["target"] not in ("mix", "cmp"):
            raise ConfigError("refine target must be 'mix' or 'cmp'")
        if self["refine"]["mu"] is not None and self["refine"]["mu"] <= 0:
            raise ConfigError("refine mu must be positive")
        for key in ("input", "gt"):
            path = run[key]
            if path and not path.startswith("fixture:") and not Path(path).exists():
                raise ConfigError(f"{key} path does not exist: {path}")
        if need_input and not run["input"]:
            raise ConfigError("an input mesh is required (--input or [run] input)")
        self.loss_weights()
        self.augmentation()
        self.bnf()

    def preprocess(self) -> PreprocessConfig:
        r = self["remesh"]
        return PreprocessConfig(RemeshConfig(r["iterations"], r["target_edge_length"], r["feature_angle"],
                                             r["relax_steps"]), SmoothConfig(self["smooth"]["steps"]))

    def augmentation(self) -> AugmentationConfig:
        a = self["augment"]
        return AugmentationConfig(a["p"], a["k"], a["mask_sets"], self["run"]["seed"])

    def model(self) -> ModelConfig:
        m = dict(self["model"])
        levels = m.pop("levels")
        return ModelConfig(arch=self["run"]["arch"], levels=levels, seed=self["run"]["seed"], **m)

    def bnf(self) -> BnfParams:
        b = self["bnf"]
        return BnfParams(b["iterations"], b["sigma_c"], b["sigma_s"])

    def loss_weights(self) -> LossWeights:
        run, t = self["run"], self["train"]
        levels = self["model"]["levels"] if run["arch"] == "mgcn" else 0
        w = LossWeights.preset(run["arch"], run["mesh_type"], levels)
        if t["w_pos"]:
            try:
                pos = tuple(float(x) for x in t["w_pos"].split(","))
            except ValueError:
                raise ConfigError(f"w_pos must be a comma-separated list of numbers, got {t['w_pos']!r}") from None
            if len(pos) != len(w.pos):
                raise ConfigError(f"w_pos needs {len(w.pos)} values for this architecture")
            w.pos = pos
        if t["w_nrm"] is not None:
            w.nrm = t["w_nrm"]
        if t["w_reg"] is not None:
            w.reg = t["w_reg"]
        return w

    def train(self) -> TrainConfig:
        t = self["train"]
        return TrainConfig(t["steps"], self["run"]["arch"], self["run"]["mesh_type"], self.loss_weights(),
                           t["lr"], t["beta1"], t["beta2"], t["halve_every"], self.bnf())

    def mu(self) -> float:
        mu = self["refine"]["mu"]
        return mu if mu is not None else default_mu(self["run"]["mesh_type"], self["run"]["name"])
