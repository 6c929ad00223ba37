"""On-disk layout of a fitted run and output manifests."""

from __future__ import annotations

import hashlib
import json
import platform
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
import pandas as pd

from . import __version__
from .core import MortalityPanel, PanelSchema, display, load_panel
from .errors import SchemaViolation
from .mcmc import PosteriorDraws
from .spec import CovariateTable, DesignMatrix, ModelSpec, build_design


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _inventory(paths: Iterable[Path], root: Path) -> dict:
    out = {}
    for p in sorted(paths):
        if p.is_file() and not p.name.endswith("manifest.json"):
            out[str(p.relative_to(root))] = sha256_file(p)
    return out


def write_manifest(target: str | Path, command: str, config: Mapping, inputs: Iterable[str | Path] = (),
                   seed: int | None = None, extra: Mapping | None = None) -> Path:
    """Write the manifest for an output directory or a single output file.

    A directory gets ``manifest.json`` inside it; a file gets
    ``<file>.manifest.json`` beside it.
    """
    target = Path(target)
    if target.is_dir():
        root, path = target, target / "manifest.json"
        outputs = _inventory(target.rglob("*"), root)
    else:
        root, path = target.parent, target.with_name(target.name + ".manifest.json")
        outputs = _inventory([target], root)
    cfg = json.loads(json.dumps(dict(config), sort_keys=True, default=str))
    manifest = {
        "command": command,
        "config": cfg,
        "config_hash": hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest(),
        "inputs": {str(p): sha256_file(p) for p in inputs if p is not None and Path(p).is_file()},
        "seed": seed,
        "software": {"mortproj": __version__, "numpy": np.__version__, "pandas": pd.__version__,
                     "python": platform.python_version()},
        "created_at": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "outputs": outputs,
    }
    if extra:
        manifest.update(json.loads(json.dumps(dict(extra), default=str)))
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def verify_manifest(path: str | Path) -> bool:
    path = Path(path)
    m = json.loads(path.read_text())
    root = path.parent
    return all((root / rel).is_file() and sha256_file(root / rel) == digest for rel, digest in m["outputs"].items())


@dataclass
class FitRun:
    spec: ModelSpec
    panel: MortalityPanel
    covariates: CovariateTable
    draws: PosteriorDraws
    design: DesignMatrix

    def save(self, directory: str | Path) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        self.spec.write(d / "spec.json")
        self.panel.schema.write_json(d / "schema.json")
        self.panel.to_csv(d / "panel.csv")
        self.design.covariates.save(d / "covariates")
        self.draws.save(d / "draws")
        posterior_summary(self.draws).to_csv(d / "summary.csv", index=False, float_format="%.17g")

    @classmethod
    def load(cls, directory: str | Path) -> "FitRun":
        d = Path(directory)
        if not (d / "draws" / "draws.json").exists():
            raise SchemaViolation(f"{d} is not a fitted run directory")
        spec = ModelSpec.read(d / "spec.json")
        schema = PanelSchema.from_json(d / "schema.json")
        panel = load_panel(d / "panel.csv", schema)
        covs = CovariateTable.load(d / "covariates")
        draws = PosteriorDraws.load(d / "draws")
        design = build_design(spec, panel, covs, refit_standardisation=False, check_rank=False)
        return cls(spec, panel, covs, draws, design)


def posterior_summary(draws: PosteriorDraws) -> pd.DataFrame:
    rows = []
    rep = draws.report or {}
    rhat = rep.get("rhat") or {}
    ess = rep.get("ess") or {}
    for name, arr in draws.scalars().items():
        x = np.asarray(arr).ravel()
        lo, hi = np.quantile(x, [0.025, 0.975])
        rows.append({"parameter": name, "mean": x.mean(), "sd": x.std(ddof=1) if x.size > 1 else 0.0,
                     "lo95": lo, "hi95": hi, "rhat": rhat.get(name), "ess": ess.get(name)})
    df = pd.DataFrame(rows)
    for c in ("mean", "sd", "lo95", "hi95"):
        df[f"{c}_display"] = display(df[c], 4)
    return df
