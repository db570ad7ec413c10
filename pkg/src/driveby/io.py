"""File formats: CSV tables with JSON sidecars, bundles and digests.

Floats are written with 17 significant digits so every value round-trips
exactly, and JSON is written with sorted keys; rerunning a command with the
same inputs therefore produces byte-identical files.
"""
from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np

from .errors import BundleCorrupt, IoFailure, SchemaMismatch
from .matrix_profile import CacResult, MpResult
from .preprocess import ObservationSequence, SpectralSample
from .spectral import MultiChannelRecord, SingularSpectrum

SCHEMA_VERSION = 1
FLOAT_FMT = "%.17g"


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_json(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, default=_json_default) + "\n"


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"cannot serialise {type(o).__name__}")


def write_json(obj, path) -> None:
    _atomic_write(path, canonical_json(obj))


def read_json(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise IoFailure(f"missing file {path}") from exc
    except json.JSONDecodeError as exc:
        raise BundleCorrupt(f"{path}: {exc}") from exc


def _atomic_write(path, text: str) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def write_table(path, header: list[str], columns: list[np.ndarray], fmts=None) -> None:
    """Write equal-length columns as CSV; ``fmts`` defaults to exact floats."""
    fmts = fmts or [FLOAT_FMT] * len(columns)
    rows = np.column_stack([np.asarray(c, dtype=float) for c in columns]) if columns else None
    lines = [",".join(header)]
    if rows is not None and rows.size:
        fmt = ",".join(fmts)
        lines.extend(fmt % tuple(r) for r in rows)
    _atomic_write(path, "\n".join(lines) + "\n")


def read_table(path) -> tuple[list[str], np.ndarray]:
    try:
        with open(path) as fh:
            header = fh.readline().strip().split(",")
            data = np.loadtxt(fh, delimiter=",", ndmin=2)
    except FileNotFoundError as exc:
        raise IoFailure(f"missing file {path}") from exc
    except ValueError as exc:
        raise BundleCorrupt(f"{path}: {exc}") from exc
    if data.size and data.shape[1] != len(header):
        raise BundleCorrupt(f"{path}: {data.shape[1]} columns but {len(header)} names")
    return header, data


# records


def write_record(rec: MultiChannelRecord, path, extra: dict | None = None) -> None:
    path = Path(path)
    header = ["time_s"] + [f"ch{k + 1}" for k in range(rec.channels)]
    write_table(path, header, [rec.time, *rec.data])
    meta = {"sample_rate": rec.sample_rate, "label": rec.label, **(extra or {})}
    write_json(meta, path.with_suffix(".json"))


def read_record(path) -> MultiChannelRecord:
    path = Path(path)
    meta = read_json(path.with_suffix(".json"))
    header, data = read_table(path)
    if header[0] != "time_s" or len(header) < 2:
        raise BundleCorrupt(f"{path}: expected time_s,ch1,... header")
    return MultiChannelRecord(data[:, 1:].T.copy(), meta["sample_rate"], meta.get("label", ""))


# spectra and samples


def write_spectrum(spec: SingularSpectrum, path) -> None:
    write_table(path, ["freq_hz", "s1"], [spec.freqs, spec.values])


def read_spectrum(path, label: str = "") -> SingularSpectrum:
    header, data = read_table(path)
    if header != ["freq_hz", "s1"]:
        raise BundleCorrupt(f"{path}: expected freq_hz,s1 header")
    freqs = data[:, 0]
    df = float(np.round(np.median(np.diff(freqs)), 12)) if freqs.size > 1 else 0.0
    return SingularSpectrum(freqs.copy(), data[:, 1].copy(), df, label or Path(path).stem)


def write_sample(sample: SpectralSample, path, seed=None, set_size=None) -> None:
    path = Path(path)
    write_table(path, ["freq_hz", "value"], [sample.freqs, sample.values])
    write_json(
        {"source_ids": sample.source_ids, "seed": seed, "set_size": set_size},
        path.with_suffix(".json"),
    )


def read_sample(path) -> SpectralSample:
    path = Path(path)
    meta = read_json(path.with_suffix(".json"))
    _, data = read_table(path)
    return SpectralSample(data[:, 1].copy(), data[:, 0].copy(), meta["source_ids"], True)


def write_sequence(seq: ObservationSequence, path) -> None:
    path = Path(path)
    write_table(path, ["value"], [seq.flat])
    write_json(
        {
            "boundaries": seq.boundaries.tolist(),
            "truth_change_index": seq.truth_change_index,
            "sample_len": seq.sample_len,
            "source_ids": [s.source_ids for s in seq.samples],
        },
        path.with_suffix(".json"),
    )


# matrix profile


def write_mp(mp: MpResult, path) -> None:
    idx = np.arange(mp.profile.size)
    write_table(path, ["idx", "profile", "index"], [idx, mp.profile, mp.index],
                ["%d", FLOAT_FMT, "%d"])


def write_cac(cac: CacResult, path, mp: MpResult | None = None) -> None:
    path = Path(path)
    idx = np.arange(cac.cac.size)
    write_table(path, ["idx", "ac", "iac", "cac"], [idx, cac.ac, cac.iac, cac.cac],
                ["%d", "%d", FLOAT_FMT, FLOAT_FMT])
    summary = {
        "change_index": cac.change_index,
        "min_cac": cac.min_interior,
        "argmin": cac.argmin_interior,
        "edge_ignore": cac.edge_ignore,
    }
    if mp is not None:
        summary["subseq_len"] = mp.subseq_len
        summary["exclusion_radius"] = mp.exclusion_radius
    write_json(summary, path.with_suffix(".json"))


# bundles

BUNDLE_MANIFEST = "manifest.json"


def save_bundle(records, labels, manifest: dict, directory) -> Path:
    """Write records plus a manifest holding a SHA-256 digest per file."""
    directory = Path(directory)
    files = []
    for rec, lab in zip(records, labels):
        csv_path = directory / "records" / f"{rec.label}.csv"
        write_record(rec, csv_path, {"condition": lab})
        files.append(
            {
                "label": rec.label,
                "condition": lab,
                "csv": str(csv_path.relative_to(directory)),
                "sha256": sha256_file(csv_path),
                "meta_sha256": sha256_file(csv_path.with_suffix(".json")),
            }
        )
    doc = {"schema_version": SCHEMA_VERSION, "files": files, **manifest}
    write_json(doc, directory / BUNDLE_MANIFEST)
    return directory


def load_bundle(directory, verify: bool = True):
    """Returns ``(records, labels, manifest)``; raises BundleCorrupt on any mismatch."""
    directory = Path(directory)
    mpath = directory / BUNDLE_MANIFEST
    if not mpath.exists():
        raise BundleCorrupt(f"{directory} has no {BUNDLE_MANIFEST}")
    doc = read_json(mpath)
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise SchemaMismatch(f"bundle schema {doc.get('schema_version')!r} != {SCHEMA_VERSION}")
    files = doc.get("files") or []
    if not files:
        raise BundleCorrupt(f"{directory} holds no records")
    records, labels = [], []
    for entry in files:
        path = directory / entry["csv"]
        if not path.exists():
            raise BundleCorrupt(f"missing record file {path}")
        if verify and (
            sha256_file(path) != entry["sha256"]
            or sha256_file(path.with_suffix(".json")) != entry["meta_sha256"]
        ):
            raise BundleCorrupt(f"digest mismatch for {path}")
        records.append(read_record(path))
        labels.append(entry["condition"])
    return records, labels, doc
