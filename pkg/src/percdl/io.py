"""CSV ingestion and JSON serialization of datasets, dictionaries and fits.

A dataset on disk is a directory holding one CSV file per series (header
row of channel names, one row per sample) and a ``dataset.json`` manifest
listing the files, labels, N and P.  Dictionaries, activations,
personalization parameters and fit results are JSON documents with
explicit shape fields.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .core import (ActivationSet, Dictionary, PersonalizationMatrix,
                   SeriesActivations, TimeSeriesDataset)
from .solvers import FitResult, personalized_atoms, reconstruct
from .synth import GroundTruth
from .transforms import (FreeTransform, IdentityTransform, RotationTransform,
                         TimeWarpTransform)
from .warp import WarpConfig

__all__ = [
    "MANIFEST_NAME",
    "write_dataset",
    "read_dataset",
    "array_to_json",
    "array_from_json",
    "dictionary_to_json",
    "dictionary_from_json",
    "activations_to_json",
    "activations_from_json",
    "transform_to_json",
    "transform_from_json",
    "fit_result_to_json",
    "fit_result_from_json",
    "ground_truth_to_json",
    "ground_truth_from_json",
    "write_json",
    "read_json",
]

MANIFEST_NAME = "dataset.json"
FLOAT_FMT = "%.17g"


def write_json(obj, path):
    """Write ``obj`` as indented, key-sorted JSON (byte-stable for equal input)."""
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def array_to_json(a):
    a = np.asarray(a, dtype=float)
    return {"shape": list(a.shape), "data": a.ravel().tolist()}


def array_from_json(obj):
    return np.asarray(obj["data"], dtype=float).reshape(obj["shape"])


def write_dataset(dataset, directory, channel_names=None):
    """Write one CSV per series and the JSON manifest; return the manifest path."""
    os.makedirs(directory, exist_ok=True)
    S, N, P = dataset.data.shape
    names = channel_names or [f"ch{p}" for p in range(P)]
    if len(names) != P:
        raise ValueError("need one channel name per channel")
    files = []
    for s in range(S):
        fname = f"series_{s:04d}.csv"
        np.savetxt(os.path.join(directory, fname), dataset.data[s], delimiter=",",
                   fmt=FLOAT_FMT, header=",".join(names), comments="")
        files.append(fname)
    manifest = {"files": files, "labels": dataset.labels, "N": N, "P": P,
                "channels": list(names)}
    path = os.path.join(directory, MANIFEST_NAME)
    write_json(manifest, path)
    return path


def read_dataset(path):
    """Load a dataset from its manifest, or from a directory containing one.

    A directory without a manifest is read as all ``*.csv`` files in sorted
    order.
    """
    if os.path.isdir(path):
        directory = path
        mpath = os.path.join(path, MANIFEST_NAME)
        if os.path.exists(mpath):
            manifest = read_json(mpath)
        else:
            files = sorted(f for f in os.listdir(path) if f.endswith(".csv"))
            if not files:
                raise ValueError(f"no CSV files in {path}")
            manifest = {"files": files}
    else:
        directory = os.path.dirname(path)
        manifest = read_json(path)
    series = []
    for fname in manifest["files"]:
        x = np.loadtxt(os.path.join(directory, fname), delimiter=",", skiprows=1, ndmin=2)
        series.append(x)
    data = TimeSeriesDataset(series, manifest.get("labels"))
    for key, actual in (("N", data.n_samples), ("P", data.n_channels)):
        if key in manifest and manifest[key] != actual:
            raise ValueError(f"manifest {key}={manifest[key]} but files have {key}={actual}")
    return data


def dictionary_to_json(dictionary):
    atoms = dictionary.atoms if isinstance(dictionary, Dictionary) else np.asarray(dictionary)
    K, L, P = atoms.shape
    return {"K": K, "L": L, "P": P, "atoms": array_to_json(atoms)}


def dictionary_from_json(obj):
    return Dictionary(array_from_json(obj["atoms"]))


def activations_to_json(activations):
    return {
        "S": activations.n_series, "K": activations.n_atoms,
        "N": activations.n_samples, "L": activations.atom_length,
        "series": [{"positions": act.positions.tolist(), "atoms": act.atoms.tolist(),
                    "amplitudes": act.amplitudes.tolist()} for act in activations.series],
    }


def activations_from_json(obj):
    series = [SeriesActivations(s["positions"], s["atoms"], s["amplitudes"])
              for s in obj["series"]]
    return ActivationSet(series, obj["K"], obj["N"], obj["L"])


def transform_to_json(kind):
    out = {"name": kind.name}
    if isinstance(kind, TimeWarpTransform):
        cfg = kind.cfg
        out.update(D=cfg.D, W=cfg.W, sigma=cfg.sigma, theta_margin=cfg.theta_margin)
    elif isinstance(kind, RotationTransform):
        out["proper"] = kind.proper
    return out


def transform_from_json(obj):
    name = obj["name"]
    if name == "identity":
        return IdentityTransform()
    if name == "free":
        return FreeTransform()
    if name == "timewarp":
        return TimeWarpTransform(WarpConfig(obj["D"], obj["W"], obj["sigma"],
                                            obj["theta_margin"]))
    if name == "rotation":
        return RotationTransform(obj.get("proper", False))
    raise ValueError(f"unknown transform {name!r}")


def fit_result_to_json(result):
    return {
        "dictionary": dictionary_to_json(result.dictionary),
        "activations": activations_to_json(result.activations),
        "personalization": array_to_json(result.personalization.params),
        "transform": transform_to_json(result.transform),
        "objective_trace": [float(v) for v in result.objective_trace],
        "flags": list(result.flags),
    }


def fit_result_from_json(obj):
    return FitResult(dictionary_from_json(obj["dictionary"]),
                     activations_from_json(obj["activations"]),
                     PersonalizationMatrix(array_from_json(obj["personalization"])),
                     transform_from_json(obj["transform"]),
                     list(obj["objective_trace"]), 0.0, list(obj.get("flags", [])))


def ground_truth_to_json(truth):
    """Ground truth document; ``events`` lists the true window starts per series."""
    return {
        "dictionary": dictionary_to_json(truth.dictionary),
        "activations": activations_to_json(truth.activations),
        "personalization": array_to_json(truth.personalization.params),
        "transform": transform_to_json(truth.transform),
        "events": [act.positions.tolist() for act in truth.activations.series],
    }


def ground_truth_from_json(obj):
    """Inverse of :func:`ground_truth_to_json`; the clean signals are rebuilt."""
    dictionary = dictionary_from_json(obj["dictionary"])
    activations = activations_from_json(obj["activations"])
    pers = PersonalizationMatrix(array_from_json(obj["personalization"]))
    kind = transform_from_json(obj["transform"])
    clean = reconstruct(activations, personalized_atoms(dictionary, pers, kind))
    return GroundTruth(dictionary, activations, pers, TimeSeriesDataset(clean), kind)
