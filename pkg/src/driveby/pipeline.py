"""End-to-end runs: simulate, FDD, AAE detection, matrix-profile detection, reports.

Every command writes its artifacts under an output directory together with
``run_manifest.json``. The manifest's ``run_id`` is a digest of the command,
its resolved configuration and the digests of its inputs, and every JSON
artifact carries that ``run_id``. Rerunning the command from the manifest
reproduces the artifacts byte for byte.
"""
from __future__ import annotations

import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from . import aae
from . import io
from .errors import ConfigInvalid, DataError, SchemaMismatch, TooFewSamples
from .matrix_profile import DEFAULT_SUBSEQ_LEN, DETECTION_THRESHOLD, detect_change
from .preprocess import SAMPLE_LINES, assemble_sequence, make_samples
from .spectral import (
    DEFAULT_SEGMENT_S,
    DEFAULT_TARGET_DF,
    MOTOR_BAND,
    MultiChannelRecord,
    SingularSpectrum,
    compute_cpsd,
    pick_peak,
    pool_cpsd,
    svd_sweep,
)
from .vbi_sim import (
    BeamModel,
    ScenarioConfig,
    VehicleModel,
    derive_seeds,
    generate_dataset,
)

RUN_MANIFEST = "run_manifest.json"
REPORT_FILE = "report.json"


@dataclass
class CaseSpec:
    length: float
    f1: float
    mass_per_length: float
    crossings: int
    n_damaged: int
    damage: list = field(default_factory=list)


CASES = {
    # 17 m steel footbridge with an added-mass variant
    "unsw": CaseSpec(17.0, 6.65, 200.0, 49, 10, [(8.5, 75.0)] * 5),
    # 23.9 m span, nominal crossings only
    "bulli": CaseSpec(23.9, 6.7, 400.0, 39, 0, []),
}
DIRECT_RECORDS = 30


@dataclass
class BeamSection:
    damping_ratio: float = 0.01
    n_modes: int = 4
    length: float | None = None
    f1: float | None = None
    mass_per_length: float | None = None


@dataclass
class FddSection:
    band: tuple[float, float] = (1.0, 10.0)
    motor_band: tuple[float, float] = MOTOR_BAND
    min_prominence: float = 0.1
    segment_s: float = DEFAULT_SEGMENT_S
    overlap: float = 0.5
    target_df: float = DEFAULT_TARGET_DF


@dataclass
class AaeSection:
    set_size: int = 3
    n_samples: int = 50
    n_damaged_samples: int = 10
    latent_dim: int = aae.LATENT_DIM
    epochs: int = 2000
    batch_size: int = 8
    learning_rate: float = 1e-3
    split_ratio: float = 0.8
    threshold_percentile: float = 90.0


@dataclass
class MpSection:
    subseq_len: int = DEFAULT_SUBSEQ_LEN
    exclusion_radius: int | None = None
    edge_ignore: int = SAMPLE_LINES
    threshold: float = DETECTION_THRESHOLD
    set_size: int = 5
    composition: str = "30"
    trials: int = 100
    surface_stride: int = 30


@dataclass
class RunConfig:
    """Everything a command needs; loaded from JSON, overridable from the CLI."""

    case: str = "unsw"
    seed: int = 0
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    beam: BeamSection = field(default_factory=BeamSection)
    vehicle: VehicleModel = field(default_factory=VehicleModel)
    damage: list | None = None
    fdd: FddSection = field(default_factory=FddSection)
    aae: AaeSection = field(default_factory=AaeSection)
    mp: MpSection = field(default_factory=MpSection)

    def to_dict(self) -> dict:
        return asdict(self)


SECTIONS = {
    "scenario": ScenarioConfig,
    "beam": BeamSection,
    "vehicle": VehicleModel,
    "fdd": FddSection,
    "aae": AaeSection,
    "mp": MpSection,
}


def _build(cls, values: dict, where: str):
    known = {f.name for f in fields(cls)}
    for key in values:
        if key not in known:
            raise ConfigInvalid(f"unknown config key '{where}.{key}'")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigInvalid(f"invalid value in '{where}': {exc}") from exc


def config_from_dict(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigInvalid("config must be a JSON object")
    top = {f.name for f in fields(RunConfig)}
    for key in doc:
        if key not in top:
            raise ConfigInvalid(f"unknown config key '{key}'")
    kwargs = {}
    for name, cls in SECTIONS.items():
        section = doc.get(name, {})
        if not isinstance(section, dict):
            raise ConfigInvalid(f"config key '{name}' must be an object")
        kwargs[name] = _build(cls, section, name)
    for key in ("case", "seed", "damage"):
        if key in doc:
            kwargs[key] = doc[key]
    cfg = RunConfig(**kwargs)
    if cfg.case not in CASES:
        raise ConfigInvalid(f"unknown config value case={cfg.case!r}; choose from {sorted(CASES)}")
    if not isinstance(cfg.seed, int) or cfg.seed < 0:
        raise ConfigInvalid("config key 'seed' must be a non-negative integer")
    return cfg


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.is_file():
        raise ConfigInvalid(f"config file '{path}' not found")
    try:
        doc = io.read_json(path)
    except DataError as exc:
        raise ConfigInvalid(f"config file '{path}' is not valid JSON") from exc
    return config_from_dict(doc)


def stream_seed(master: int, name: str) -> int:
    """Seed of the named random stream derived from the master seed."""
    ss = np.random.SeedSequence([master, zlib.crc32(name.encode())])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


# models


def case_models(cfg: RunConfig):
    """``(beam, vehicle, damaged_beam_or_None)`` for the configured case."""
    spec = CASES[cfg.case]
    b = cfg.beam
    beam = BeamModel.tuned(
        b.length if b.length is not None else spec.length,
        b.f1 if b.f1 is not None else spec.f1,
        b.mass_per_length if b.mass_per_length is not None else spec.mass_per_length,
        damping_ratio=b.damping_ratio,
        n_modes=b.n_modes,
    )
    damage = spec.damage if cfg.damage is None else [tuple(d) for d in cfg.damage]
    damaged = beam.with_added_masses(damage) if damage and cfg.scenario.n_damaged > 0 else None
    return beam, cfg.vehicle, damaged


def case_scenario(cfg: RunConfig, explicit: set[str] = frozenset()) -> ScenarioConfig:
    """Scenario with case defaults filled in for keys not set explicitly."""
    spec = CASES[cfg.case]
    sc = asdict(cfg.scenario)
    sc["seed"] = cfg.seed
    if "crossings" not in explicit:
        sc["crossings"] = DIRECT_RECORDS if sc["scenario"] == "direct" else spec.crossings
    if "n_damaged" not in explicit:
        sc["n_damaged"] = 0 if sc["scenario"] == "direct" else spec.n_damaged
    return ScenarioConfig(**sc)


# manifests


@dataclass
class RunManifest:
    command: str
    args: dict
    config: dict
    seeds: dict
    inputs: dict
    outputs: dict = field(default_factory=dict)
    version: str = __version__
    schema_version: int = io.SCHEMA_VERSION

    @property
    def run_id(self) -> str:
        return io.sha256_json(
            {
                "command": self.command,
                "args": self.args,
                "config": self.config,
                "seeds": self.seeds,
                "inputs": {k: v["sha256"] for k, v in self.inputs.items()},
                "version": self.version,
            }
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["run_id"] = self.run_id
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunManifest":
        if d.get("schema_version") != io.SCHEMA_VERSION:
            raise SchemaMismatch(
                f"run manifest schema {d.get('schema_version')!r} != {io.SCHEMA_VERSION}"
            )
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def _input_digest(path: Path) -> dict:
    """Digest of a bundle or run directory (its manifest) or of a file."""
    path = Path(path).resolve()
    if path.is_dir():
        for name in (io.BUNDLE_MANIFEST, RUN_MANIFEST):
            if (path / name).exists():
                return {"path": str(path), "sha256": io.sha256_file(path / name)}
        raise DataError(f"{path} is neither a bundle nor a run directory")
    if not path.exists():
        raise DataError(f"input {path} does not exist")
    return {"path": str(path), "sha256": io.sha256_file(path)}


def _finish(out: Path, manifest: RunManifest) -> RunManifest:
    outputs = {}
    for p in sorted(out.rglob("*")):
        if p.is_file() and p.name != RUN_MANIFEST and not p.name.endswith(".tmp"):
            outputs[str(p.relative_to(out))] = io.sha256_file(p)
    manifest.outputs = outputs
    io.write_json(manifest.to_dict(), out / RUN_MANIFEST)
    return manifest


# simulate


def run_simulate(cfg: RunConfig, out, explicit: set[str] = frozenset()) -> RunManifest:
    out = Path(out)
    scen = case_scenario(cfg, explicit)
    beam, vehicle, damaged = case_models(cfg)
    if scen.n_damaged == 0:
        damaged = None
    bundle = generate_dataset(beam, vehicle, scen, damaged_variant=damaged)
    man = RunManifest(
        command="simulate",
        args={"explicit": sorted(explicit)},
        config=cfg.to_dict(),
        seeds={"master": cfg.seed, "records": bundle.seeds},
        inputs={},
    )
    doc = dict(bundle.manifest)
    doc["case"] = cfg.case
    doc["run_id"] = man.run_id
    io.save_bundle(bundle.records, bundle.labels, doc, out)
    return _finish(out, man)


# spectra


def _cpsd(rec: MultiChannelRecord, f: FddSection):
    seg = min(rec.samples_per_channel, int(round(f.segment_s * rec.sample_rate)))
    return compute_cpsd(rec, seg_len=seg, overlap=f.overlap, target_df=f.target_df)


def record_spectrum(rec: MultiChannelRecord, f: FddSection) -> SingularSpectrum:
    return svd_sweep(_cpsd(rec, f))


def run_fdd(cfg: RunConfig, bundle, out, mode: str = "indirect", threads: int = 1) -> RunManifest:
    """Per-record first singular values and pooled peak report(s)."""
    if mode not in ("direct", "indirect"):
        raise ConfigInvalid(f"unknown fdd mode {mode!r}")
    out = Path(out)
    records, labels, bmeta = io.load_bundle(bundle)
    f = cfg.fdd
    man = RunManifest(
        command="fdd",
        args={"mode": mode},
        config=cfg.to_dict(),
        seeds={"master": cfg.seed},
        inputs={"bundle": _input_digest(bundle)},
    )
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        stacks = list(pool.map(lambda r: _cpsd(r, f), records))
    entries = []
    for rec, lab, st in zip(records, labels, stacks):
        spec = svd_sweep(st)
        path = out / "spectra" / f"{rec.label}.csv"
        io.write_spectrum(spec, path)
        entries.append({"label": rec.label, "condition": lab, "csv": str(path.relative_to(out))})

    peaks = {}
    for cond in sorted(set(labels)):
        group = [st for st, lab in zip(stacks, labels) if lab == cond]
        pooled = svd_sweep(pool_cpsd(group))
        pooled.label = f"pooled_{cond}"
        io.write_spectrum(pooled, out / f"pooled_{cond}.csv")
        rep = {"bridge": pick_peak(pooled, f.band, f.min_prominence).to_dict()}
        if mode == "indirect":
            rep["motor"] = pick_peak(pooled, f.motor_band, f.min_prominence).to_dict()
        rep["n_records"] = len(group)
        peaks[cond] = rep
    nominal = peaks.get("nominal") or next(iter(peaks.values()))
    report = {
        "schema_version": io.SCHEMA_VERSION,
        "run_id": man.run_id,
        "case": bmeta.get("case", cfg.case),
        "mode": mode,
        "f_b1": nominal["bridge"]["peak_freq"],
        "f_vd": nominal["motor"]["peak_freq"] if mode == "indirect" else None,
        "peaks": peaks,
        "ground_truth_hz": bmeta.get("frequencies_hz"),
    }
    io.write_json({"run_id": man.run_id, "spectra": entries}, out / "spectra.json")
    io.write_json(report, out / REPORT_FILE)
    return _finish(out, man)


def load_spectra(source, cfg: RunConfig, threads: int = 1):
    """Per-record spectra from an fdd run directory or a dataset bundle."""
    source = Path(source)
    if (source / "spectra.json").exists():
        doc = io.read_json(source / "spectra.json")
        specs = [io.read_spectrum(source / e["csv"], e["label"]) for e in doc["spectra"]]
        return specs, [e["condition"] for e in doc["spectra"]]
    records, labels, _ = io.load_bundle(source)
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        specs = list(pool.map(lambda r: record_spectrum(r, cfg.fdd), records))
    for s, r in zip(specs, records):
        s.label = r.label
    return specs, labels


def _split_conditions(specs, labels):
    nom = [s for s, lab in zip(specs, labels) if lab == "nominal"]
    dam = [s for s, lab in zip(specs, labels) if lab != "nominal"]
    return nom, dam


# AAE


def confusion(test_flags, damaged_flags) -> dict:
    test_flags = np.asarray(test_flags, dtype=bool)
    damaged_flags = np.asarray(damaged_flags, dtype=bool)
    return {
        "true_negative": int((~test_flags).sum()),
        "false_positive": int(test_flags.sum()),
        "true_positive": int(damaged_flags.sum()),
        "false_negative": int((~damaged_flags).sum()),
    }


def run_detect_aae(cfg: RunConfig, source, out, threads: int = 1) -> RunManifest:
    """Sets of crossings -> train on nominal -> threshold -> classify test and damaged."""
    out = Path(out)
    a = cfg.aae
    specs, labels = load_spectra(source, cfg, threads)
    nom, dam = _split_conditions(specs, labels)
    if len(nom) < 10:
        raise TooFewSamples(f"AAE detection needs at least 10 nominal crossings, got {len(nom)}")
    seeds = {
        "master": cfg.seed,
        "samples": stream_seed(cfg.seed, "aae.samples"),
        "init": stream_seed(cfg.seed, "aae.init"),
        "train": stream_seed(cfg.seed, "aae.train"),
    }
    man = RunManifest(
        command="detect-aae",
        args={},
        config=cfg.to_dict(),
        seeds=seeds,
        inputs={"source": _input_digest(source)},
    )
    rng = np.random.default_rng(seeds["samples"])
    samples = make_samples(nom, a.set_size, a.n_samples, rng)
    changed = make_samples(dam, a.set_size, a.n_damaged_samples, rng) if dam else []
    n_train = aae.split_calibration(len(samples), a.split_ratio)
    train_set, test_set = samples[:n_train], samples[n_train:]

    tcfg = aae.TrainConfig(
        epochs=a.epochs,
        batch_size=a.batch_size,
        learning_rate=a.learning_rate,
        split_ratio=a.split_ratio,
        threshold_percentile=a.threshold_percentile,
        seed=seeds["train"],
    )
    model = aae.init_model(SAMPLE_LINES, a.latent_dim, seeds["init"])
    res = aae.train(model, train_set, tcfg)
    res.model.manifest["run_id"] = man.run_id
    aae.save_model(res.model, out / "model.json")

    ids = [f"test_{k:03d}" for k in range(len(test_set))]
    ids += [f"changed_{k:03d}" for k in range(len(changed))]
    det = aae.classify(res.model, res.threshold, test_set + changed, ids)
    det.to_csv(out / "detections.csv")
    n_cal = res.validation_errors.size
    io.write_table(
        out / "calibration_errors.csv",
        ["k", "error"],
        [np.arange(n_cal), res.validation_errors],
        ["%d", io.FLOAT_FMT],
    )
    io.write_table(
        out / "training_history.csv",
        ["epoch", "reconstruction", "discriminator", "adversarial"],
        [np.arange(len(res.history)), *res.history.T],
        ["%d", io.FLOAT_FMT, io.FLOAT_FMT, io.FLOAT_FMT],
    )
    flags = det.anomalous
    counts = confusion(flags[: len(test_set)], flags[len(test_set):])
    report = {
        "schema_version": io.SCHEMA_VERSION,
        "run_id": man.run_id,
        "case": cfg.case,
        "aae": {
            "threshold": res.threshold,
            "confusion": counts,
            "n_train": len(train_set),
            "n_test": len(test_set),
            "n_changed": len(changed),
            "detections": "detections.csv",
            "sample_sources": {i: s.source_ids for i, s in zip(ids, test_set + changed)},
        },
    }
    io.write_json(report, out / REPORT_FILE)
    return _finish(out, man)


# matrix profile


def parse_composition(text: str) -> tuple[int, int]:
    """``"30"`` -> (30, 0); ``"20+10"`` -> (20, 10)."""
    parts = str(text).split("+")
    try:
        nums = [int(p) for p in parts]
    except ValueError as exc:
        raise ConfigInvalid(f"bad composition {text!r}") from exc
    if len(nums) == 1:
        nums.append(0)
    if len(nums) != 2 or nums[0] < 1 or nums[1] < 0:
        raise ConfigInvalid(f"bad composition {text!r}; use e.g. '30' or '20+10'")
    return nums[0], nums[1]


@dataclass
class TrialResult:
    seed: int
    min_cac: float
    argmin: int | None
    change_index: int | None
    cac: np.ndarray


def mp_trial(nom, changed, composition, m: MpSection, seed: int) -> TrialResult:
    n_nom, n_chg = composition
    rng = np.random.default_rng(seed)
    samples = make_samples(nom, m.set_size, n_nom, rng)
    if n_chg:
        samples += make_samples(changed, m.set_size, n_chg, rng)
    seq = assemble_sequence(samples, n_nom if n_chg else None)
    _, cac = detect_change(seq, m.subseq_len, m.exclusion_radius, m.edge_ignore, m.threshold)
    return TrialResult(seed, cac.min_interior, cac.argmin_interior, cac.change_index, cac.cac)


def run_detect_mp(cfg: RunConfig, source, out, threads: int = 1) -> RunManifest:
    out = Path(out)
    m = cfg.mp
    composition = parse_composition(m.composition)
    if m.trials < 1:
        raise ConfigInvalid("mp.trials must be >= 1")
    specs, labels = load_spectra(source, cfg, threads)
    nom, dam = _split_conditions(specs, labels)
    if composition[1] and not dam:
        raise DataError("composition asks for changed samples but the input has none")
    trial_seeds = derive_seeds(stream_seed(cfg.seed, "mp.trials"), m.trials)
    man = RunManifest(
        command="detect-mp",
        args={},
        config=cfg.to_dict(),
        seeds={"master": cfg.seed, "trials": trial_seeds},
        inputs={"source": _input_digest(source)},
    )
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        results = list(pool.map(lambda s: mp_trial(nom, dam, composition, m, s), trial_seeds))

    truth = composition[0] * SAMPLE_LINES if composition[1] else None
    n_idx = results[0].cac.size
    cols = np.arange(0, n_idx, m.surface_stride)
    io.write_table(
        out / "cac_surface.csv",
        ["trial"] + [f"k{c}" for c in cols],
        [np.arange(len(results)), *np.vstack([r.cac[cols] for r in results]).T],
        ["%d"] + [io.FLOAT_FMT] * cols.size,
    )
    mins = np.array([r.min_cac for r in results])
    argmins = np.array([-1 if r.argmin is None else r.argmin for r in results])
    flagged = np.array([r.change_index is not None for r in results])
    io.write_table(
        out / "trials.csv",
        ["trial", "min_cac", "argmin", "change_flagged"],
        [np.arange(len(results)), mins, argmins, flagged],
        ["%d", io.FLOAT_FMT, "%d", "%d"],
    )
    summary = {
        "composition": m.composition,
        "trials": m.trials,
        "subseq_len": m.subseq_len,
        "edge_ignore": m.edge_ignore,
        "threshold": m.threshold,
        "min_cac_mean": float(mins.mean()),
        "min_cac_lowest": float(mins.min()),
        "fraction_flagged": float(flagged.mean()),
        "fraction_min_at_least_0p8": float(np.mean(mins >= 0.8)),
        "truth_index": truth,
    }
    if truth is not None:
        summary["fraction_within_one_sample"] = float(
            np.mean(np.abs(argmins - truth) <= SAMPLE_LINES)
        )
    first = results[0]
    report = {
        "schema_version": io.SCHEMA_VERSION,
        "run_id": man.run_id,
        "case": cfg.case,
        "cac": {
            "min_value": first.min_cac,
            "change_index": first.change_index,
            "summary": summary,
            "surface": "cac_surface.csv",
            "trials": "trials.csv",
        },
    }
    io.write_json(report, out / REPORT_FILE)
    return _finish(out, man)


# reports


def run_report(cfg: RunConfig, paths, out) -> RunManifest:
    """Merge case-study reports and emit plot-ready tables."""
    out = Path(out)
    if not paths:
        raise DataError("report needs at least one input")
    inputs, docs = {}, []
    for k, p in enumerate(paths):
        p = Path(p)
        rpath = p / REPORT_FILE if p.is_dir() else p
        doc = io.read_json(rpath)
        if doc.get("schema_version") != io.SCHEMA_VERSION:
            raise SchemaMismatch(
                f"{rpath}: schema_version {doc.get('schema_version')!r} != {io.SCHEMA_VERSION}"
            )
        inputs[f"report{k}"] = {"path": str(rpath), "sha256": io.sha256_file(rpath)}
        docs.append((rpath.parent, doc))
    man = RunManifest("report", {}, cfg.to_dict(), {"master": cfg.seed}, inputs)

    cases: dict[str, dict] = {}
    plots = []
    for k, (base, doc) in enumerate(docs):
        entry = cases.setdefault(doc.get("case", "unknown"), {})
        for key in ("f_b1", "f_vd", "aae", "cac", "peaks", "mode"):
            if key in doc and doc[key] is not None:
                entry[key] = doc[key]
        entry.setdefault("sources", []).append(doc.get("run_id"))
        if "aae" in doc:
            # reconstruction errors against the threshold
            name = f"errors_vs_threshold_{k}.csv"
            _copy_detections(base / doc["aae"]["detections"], out / name)
            plots.append(name)
        if "peaks" in doc:
            for cond in doc["peaks"]:
                src = base / f"pooled_{cond}.csv"
                if src.exists():
                    name = f"spectrum_{doc.get('case', 'case')}_{cond}_{k}.csv"
                    io.write_spectrum(io.read_spectrum(src), out / name)
                    plots.append(name)
        if "cac" in doc:
            src = base / doc["cac"]["surface"]
            name = f"cac_surface_{k}.csv"
            (out / name).parent.mkdir(parents=True, exist_ok=True)
            (out / name).write_bytes(src.read_bytes())
            plots.append(name)
    merged = {
        "schema_version": io.SCHEMA_VERSION,
        "run_id": man.run_id,
        "cases": cases,
        "plot_data": plots,
    }
    io.write_json(merged, out / "consolidated.json")
    return _finish(out, man)


def _copy_detections(src: Path, dst: Path):
    header, rows = _read_detections(src)
    lines = [",".join(header)] + [",".join(r) for r in rows]
    dst.parent.mkdir(parents=True, exist_ok=True)
    dst.write_text("\n".join(lines) + "\n")


def _read_detections(path: Path):
    import csv

    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def confusion_from_detections(path) -> dict:
    """Recount a report's confusion matrix from its persisted detections."""
    header, rows = _read_detections(Path(path))
    col = {name: k for k, name in enumerate(header)}
    test = [r[col["verdict"]] == "anomalous" for r in rows if r[col["sample_id"]].startswith("test_")]
    chg = [r[col["verdict"]] == "anomalous" for r in rows if r[col["sample_id"]].startswith("changed_")]
    return confusion(test, chg)
