"""Experiment configuration, dataset generation and artifact persistence."""

from __future__ import annotations

import copy
import hashlib
import json
import math
import os
from dataclasses import asdict, is_dataclass
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .dataset import Dataset
from .design import GroupedDesign, PaddedVector, compatibility_phi2, read_design_csv, write_design_csv
from .family import KINDS, get_family
from .prior import SasPrior, make_prior

GENERATORS = ("iid_gaussian_normalized", "orthonormal", "duplicated_pair", "from_file")
SUBCOMMANDS = ("generate", "fit", "diagnose", "coverage", "audit")
DIAGNOSTICS = ("recovery", "oracle_tv", "tv_exact_mixture", "renyi", "score_envelope", "hellinger")

DEFAULTS: dict[str, Any] = {
    "family": {"kind": "gaussian", "r": None, "tau": 1.0},
    "design": {"n": 200, "G": 10, "group_sizes": None, "generator": "iid_gaussian_normalized",
               "path": None},
    "truth": {"support": [0], "blocks": None, "beta_min_multiple": None, "magnitude": None},
    "prior": {"size": {"kind": "complexity", "c": 1.0, "A": 1.0},
              "slab": {"kind": "group_gaussian", "sigma2": 1.0}},
    "alpha": 1.0,
    "s_max": 3,
    "k_dim": 3,
    "seed": 0,
    "n_grid": None,
    "mode": "laplace",
    "level": 0.95,
    "replications": {"coverage": 500, "recovery": 200, "score": 10000, "hellinger": 50,
                     "renyi_transform": 20000},
    "tolerances": {"gh": 1e-8, "tv_mc": 40000, "min_ess": 100, "exact_screen": None},
    "diagnostics": ["recovery", "oracle_tv", "renyi"],
    "score_s": 2,
    "renyi_c": 1.0,
    "hellinger_k": 1.0,
}


class ConfigError(ValueError):
    """Invalid experiment configuration; ``problems`` itemizes every issue."""

    def __init__(self, problems: list[str]):
        super().__init__("; ".join(problems))
        self.problems = list(problems)


class OutputExistsError(RuntimeError):
    pass


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _num(x, name, problems, positive=False, integer=False):
    if isinstance(x, bool) or not isinstance(x, (int, float)):
        problems.append(f"{name}: expected a number, got {x!r}")
        return None
    if integer and int(x) != x:
        problems.append(f"{name}: expected an integer, got {x!r}")
        return None
    if positive and not x > 0:
        problems.append(f"{name}: must be positive")
        return None
    return int(x) if integer else float(x)


def validate_config(raw: dict) -> dict:
    """Merge defaults, check every field and return the canonical config."""
    if not isinstance(raw, dict):
        raise ConfigError(["config root must be a mapping"])
    unknown = sorted(set(raw) - set(DEFAULTS))
    problems = [f"unknown key {k!r}" for k in unknown]
    cfg = _merge(DEFAULTS, {k: v for k, v in raw.items() if k in DEFAULTS})

    fam = cfg["family"]
    if fam["kind"] not in KINDS:
        problems.append(f"family.kind: expected one of {list(KINDS)}, got {fam['kind']!r}")
    if fam["kind"] == "negbin_log":
        if fam.get("r") is None:
            problems.append("family.r: required for negbin_log")
        else:
            fam["r"] = _num(fam["r"], "family.r", problems, positive=True)
    else:
        fam["r"] = None
    tau = fam["tau"]
    if isinstance(tau, list):
        fam["tau"] = [float(_num(t, "family.tau[]", problems, positive=True) or 1.0) for t in tau]
    else:
        fam["tau"] = _num(tau, "family.tau", problems, positive=True)

    d = cfg["design"]
    d["n"] = _num(d["n"], "design.n", problems, positive=True, integer=True)
    d["G"] = _num(d["G"], "design.G", problems, positive=True, integer=True)
    if d["generator"] not in GENERATORS:
        problems.append(f"design.generator: expected one of {list(GENERATORS)}, got {d['generator']!r}")
    if d["generator"] == "from_file" and not d.get("path"):
        problems.append("design.path: required for the from_file generator")
    if d["group_sizes"] is None and d["G"]:
        d["group_sizes"] = [1] * d["G"]
    elif d["group_sizes"] is not None:
        if (not isinstance(d["group_sizes"], list) or not d["group_sizes"]
                or any(not isinstance(m, int) or isinstance(m, bool) or m < 1 for m in d["group_sizes"])):
            problems.append("design.group_sizes: expected a list of positive integers")
        elif d["G"] and len(d["group_sizes"]) != d["G"]:
            problems.append("design.group_sizes: length must equal design.G")
    if d["generator"] == "duplicated_pair" and d["group_sizes"] and len(d["group_sizes"]) >= 2:
        if d["group_sizes"][0] != d["group_sizes"][1]:
            problems.append("design.group_sizes: duplicated_pair needs equal sizes for groups 0 and 1")

    t = cfg["truth"]
    sup = t["support"]
    if not isinstance(sup, list) or any(not isinstance(g, int) or isinstance(g, bool) for g in sup):
        problems.append("truth.support: expected a list of group indices")
    else:
        t["support"] = sorted(set(sup))
        if d["G"] and any(not 0 <= g < d["G"] for g in sup):
            problems.append("truth.support: group index out of range")
    given = [k for k in ("blocks", "beta_min_multiple", "magnitude") if t.get(k) is not None]
    if len(given) > 1:
        problems.append(f"truth: give exactly one of blocks, beta_min_multiple, magnitude (got {given})")
    if not given and t["support"]:
        problems.append("truth: one of blocks, beta_min_multiple or magnitude is required")
    if t.get("blocks") is not None and isinstance(t["support"], list):
        if len(t["blocks"]) != len(t["support"]):
            problems.append("truth.blocks: one block per support group")
        elif d["group_sizes"]:
            for g, blk in zip(t["support"], t["blocks"]):
                if 0 <= g < len(d["group_sizes"]) and len(blk) != d["group_sizes"][g]:
                    problems.append(f"truth.blocks: block for group {g} has the wrong length")
            t["blocks"] = [[float(v) for v in blk] for blk in t["blocks"]]
    for k in ("beta_min_multiple", "magnitude"):
        if t.get(k) is not None:
            t[k] = _num(t[k], f"truth.{k}", problems, positive=True)

    cfg["alpha"] = _num(cfg["alpha"], "alpha", problems)
    if cfg["alpha"] is not None and not 0.0 < cfg["alpha"] <= 1.0:
        problems.append("alpha: must lie in (0, 1]")
    cfg["s_max"] = _num(cfg["s_max"], "s_max", problems, integer=True)
    cfg["k_dim"] = _num(cfg["k_dim"], "k_dim", problems, positive=True, integer=True)
    cfg["seed"] = _num(cfg["seed"], "seed", problems, integer=True)
    if cfg["seed"] is not None and not 0 <= cfg["seed"] < 2**64:
        problems.append("seed: must be an unsigned 64-bit integer")
    if cfg["n_grid"] is not None:
        if not isinstance(cfg["n_grid"], list) or not cfg["n_grid"]:
            problems.append("n_grid: expected a nonempty list")
        else:
            cfg["n_grid"] = [_num(v, "n_grid[]", problems, positive=True, integer=True) for v in cfg["n_grid"]]
            if any(v is None for v in cfg["n_grid"]) or cfg["n_grid"] != sorted(set(cfg["n_grid"])):
                problems.append("n_grid: must be strictly increasing integers")
    if cfg["mode"] not in ("laplace", "exact"):
        problems.append("mode: expected 'laplace' or 'exact'")
    cfg["level"] = _num(cfg["level"], "level", problems)
    if cfg["level"] is not None and not 0.0 < cfg["level"] < 1.0:
        problems.append("level: must lie in (0, 1)")
    for k, v in cfg["replications"].items():
        cfg["replications"][k] = _num(v, f"replications.{k}", problems, positive=True, integer=True)
    bad = [x for x in cfg["diagnostics"] if x not in DIAGNOSTICS]
    if bad:
        problems.append(f"diagnostics: unknown entries {bad}; allowed {list(DIAGNOSTICS)}")
    p = cfg["prior"]
    if p["size"].get("kind") not in ("complexity", "beta_binomial"):
        problems.append("prior.size.kind: expected complexity or beta_binomial")
    if p["slab"].get("kind") not in ("group_gaussian", "group_laplace"):
        problems.append("prior.slab.kind: expected group_gaussian or group_laplace")
    if not problems and d["group_sizes"]:
        try:
            make_prior(p["size"], p["slab"], d["group_sizes"])
        except ValueError as exc:
            problems.append(f"prior: {exc}")
    if problems:
        raise ConfigError(problems)
    return cfg


def load_config(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError([f"cannot read config {path}: {exc}"]) from None
    except yaml.YAMLError as exc:
        raise ConfigError([f"malformed YAML in {path}: {exc}"]) from None
    return validate_config(raw or {})


def dump_config(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=True, default_flow_style=None)


def canonical_json(cfg: dict) -> str:
    return json.dumps(cfg, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical_json(cfg).encode()).hexdigest()


def bundled_config(name: str) -> Path:
    return Path(__file__).with_name("configs") / f"{name}.yaml"


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def streams(seed: int, n: int) -> tuple:
    """Independent design, response and experiment generators for one ``n``."""
    ss = np.random.SeedSequence([int(seed), int(n)])
    return tuple(np.random.default_rng(s) for s in ss.spawn(3))


def make_design(dcfg: dict, rng: np.random.Generator, n: int | None = None) -> GroupedDesign:
    n = int(n if n is not None else dcfg["n"])
    sizes = list(dcfg["group_sizes"])
    p = sum(sizes)
    gen = dcfg["generator"]
    if gen == "from_file":
        return read_design_csv(dcfg["path"])
    if gen == "orthonormal":
        if n < p:
            raise ConfigError([f"design: orthonormal generator needs n >= p ({n} < {p})"])
        q, r = np.linalg.qr(rng.standard_normal((n, p)))
        x = q * np.sign(np.diag(r))[None, :] * math.sqrt(n)
        return GroupedDesign(x, sizes)
    x = rng.standard_normal((n, p))
    x *= math.sqrt(n) / np.linalg.norm(x, axis=0)
    if gen == "duplicated_pair":
        m = sizes[0]
        x[:, m:2 * m] = x[:, :m]
    return GroupedDesign(x, sizes)


def _signed_blocks(design: GroupedDesign, support, magnitude: float) -> list:
    blocks = []
    for k, g in enumerate(support):
        m = design.group_sizes[g]
        sign = 1.0 if k % 2 == 0 else -1.0
        blocks.append(np.full(m, sign * magnitude / math.sqrt(m)))
    return blocks


def calibrate_magnitude(family, design: GroupedDesign, tau, support, multiple: float,
                        k_dim: int) -> tuple[float, float]:
    """Group norm ``multiple * eps_n / phi2``.

    ``phi2`` is taken at the Fisher weights of the null predictor ``eta = 0``.
    Weighting by the truth itself has no fixed point for bounded-weight
    families: ``phi2`` decays faster than the magnitude grows.
    """
    s0 = len(support)
    s = min(design.G, k_dim * s0)
    eps = math.sqrt(s0 * math.log(design.G) / design.n)
    tau = np.broadcast_to(np.asarray(tau, dtype=float), (design.n,))
    w = np.asarray(family.fisher_weight(np.zeros(design.n), tau), dtype=float)
    phi = compatibility_phi2(design, w, s)
    return multiple * eps / phi, phi


def make_truth(cfg: dict, family, design: GroupedDesign, tau) -> PaddedVector:
    t = cfg["truth"]
    sup = tuple(t["support"])
    if not sup:
        return PaddedVector((), np.zeros(0))
    if t.get("blocks") is not None:
        vals = np.concatenate([np.asarray(b, dtype=float) for b in t["blocks"]])
        return PaddedVector(sup, vals)
    if t.get("magnitude") is not None:
        mag = float(t["magnitude"])
    else:
        mag, _ = calibrate_magnitude(family, design, tau, sup, float(t["beta_min_multiple"]), cfg["k_dim"])
    return PaddedVector(sup, np.concatenate(_signed_blocks(design, sup, mag)))


def make_family(cfg: dict):
    return get_family(cfg["family"]["kind"], cfg["family"].get("r"))


def make_dispersion(cfg: dict, n: int) -> np.ndarray:
    tau = cfg["family"]["tau"]
    arr = np.broadcast_to(np.asarray(tau, dtype=float), (n,)) if np.ndim(tau) == 0 else np.asarray(tau, float)
    if arr.shape != (n,):
        raise ConfigError([f"family.tau: expected a scalar or {n} values"])
    return np.array(arr)


def generate_dataset(cfg: dict, n: int | None = None, seed: int | None = None) -> Dataset:
    """Design, truth and one response draw, all from seeded streams."""
    seed = int(cfg["seed"] if seed is None else seed)
    n = int(n if n is not None else cfg["design"]["n"])
    rng_design, rng_resp, _ = streams(seed, n)
    family = make_family(cfg)
    design = make_design(cfg["design"], rng_design, n)
    if design.group_sizes != tuple(cfg["design"]["group_sizes"]):
        raise ConfigError(["design: file group sizes disagree with design.group_sizes"])
    tau = make_dispersion(cfg, design.n)
    truth = make_truth(cfg, family, design, tau)
    eta0 = design.x @ design.embed(truth)
    y = np.asarray(family.sample(eta0, tau, rng_resp), dtype=float)
    prov = {"config_hash": config_hash(cfg), "seed": seed, "n": design.n}
    return Dataset(family, design, tau, y, truth, prov)


def make_prior_for(cfg: dict, group_sizes=None) -> SasPrior:
    sizes = group_sizes if group_sizes is not None else cfg["design"]["group_sizes"]
    return make_prior(cfg["prior"]["size"], cfg["prior"]["slab"], sizes)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def _jsonable(obj):
    if is_dataclass(obj) and not isinstance(obj, type):
        return _jsonable(asdict(obj))
    if isinstance(obj, dict):
        return {str(k) if not isinstance(k, tuple) else ",".join(map(str, k)): _jsonable(v)
                for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def to_json(obj) -> str:
    return json.dumps(_jsonable(obj), sort_keys=True, indent=1) + "\n"


class ArtifactWriter:
    """Single-owner writer for one output directory.

    Refuses to overwrite files from an earlier run unless ``force`` is set.
    """

    def __init__(self, out: str | os.PathLike, cfg: dict, seed: int, force: bool = False):
        self.out = Path(out)
        self.cfg = cfg
        self.seed = int(seed)
        self.hash = config_hash(cfg)
        self.force = force
        self.written: list[str] = []
        self.out.mkdir(parents=True, exist_ok=True)

    def _path(self, name: str) -> Path:
        path = self.out / name
        if path.exists() and not self.force:
            raise OutputExistsError(f"{path} exists; pass --force to overwrite")
        self.written.append(name)
        return path

    def header(self) -> dict:
        return {"config": self.cfg, "config_hash": self.hash, "seed": self.seed}

    def json(self, name: str, payload: dict) -> Path:
        path = self._path(name)
        path.write_text(to_json({**self.header(), **payload}), encoding="utf-8")
        return path

    def metrics(self, name: str, rows) -> Path:
        path = self._path(name)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(f"# config_hash={self.hash} seed={self.seed}\n")
            fh.write("n,metric,value,se\n")
            for n, metric, value, se in rows:
                fh.write(f"{int(n)},{metric},{_fmt(value)},{_fmt(se)}\n")
        return path

    def dataset(self, ds: Dataset, prefix: str = "") -> list:
        comment = f"config_hash={self.hash} seed={self.seed}"
        write_design_csv(ds.design, self._path(f"{prefix}design.csv"), comment=comment)
        path = self._path(f"{prefix}response.csv")
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(f"# {comment}\n")
            fh.write("y,tau\n")
            for y, t in zip(ds.y, ds.tau):
                fh.write(f"{_fmt(y)},{_fmt(t)}\n")
        truth = {"support": list(ds.truth.support), "values": ds.truth.values,
                 "group_sizes": list(ds.design.group_sizes), "family": ds.family.to_dict(),
                 "digest": ds.digest(), "provenance": ds.provenance}
        self.json(f"{prefix}truth.json", truth)
        return [f"{prefix}design.csv", f"{prefix}response.csv", f"{prefix}truth.json"]


def _fmt(v) -> str:
    if v is None:
        return "nan"
    return "%.17g" % float(v)


def read_metrics_csv(path) -> list:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.startswith("#") or line.startswith("n,metric"):
                continue
            n, metric, value, se = line.rstrip("\n").split(",")
            rows.append((int(n), metric, float(value), float(se)))
    return rows


def read_response_csv(path) -> tuple[np.ndarray, np.ndarray]:
    ys, ts = [], []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.startswith("#") or line.startswith("y,"):
                continue
            y, t = line.split(",")
            ys.append(float(y))
            ts.append(float(t))
    return np.array(ys), np.array(ts)
