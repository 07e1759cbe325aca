"""Independent GPs, one per output dimension, sharing the training inputs."""
from __future__ import annotations

import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ..errors import AllRestartsFailed, ValidationError
from .core import FitOptions, GpModel, fit, predict


@dataclass
class MultiGpModel:
    models: list
    x_labels: list = field(default_factory=list)
    y_labels: list = field(default_factory=list)
    data_fingerprint: str = ""

    def __post_init__(self):
        if not self.models:
            raise ValidationError("empty model list")
        X0 = self.models[0].X
        for m in self.models[1:]:
            if m.X.shape != X0.shape or not np.array_equal(m.X, X0):
                raise ValidationError("all outputs must share the training inputs")

    @property
    def X(self):
        return self.models[0].X

    @property
    def n_inputs(self):
        return self.X.shape[1]

    @property
    def n_outputs(self):
        return len(self.models)

    def __len__(self):
        return len(self.models)

    def __getitem__(self, a):
        return self.models[a]

    def to_text(self) -> str:
        data = {"x_labels": list(self.x_labels), "y_labels": list(self.y_labels),
                "data_fingerprint": self.data_fingerprint, "X": self.X.tolist(),
                "outputs": [m.to_dict() for m in self.models]}
        return json.dumps(data, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_text(cls, text: str):
        data = json.loads(text)
        X = np.array(data["X"], dtype=float)
        models = [GpModel.from_dict(d, X) for d in data["outputs"]]
        return cls(models, data["x_labels"], data["y_labels"], data["data_fingerprint"])

    def save(self, path):
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path):
        return cls.from_text(Path(path).read_text())


def _fit_one(args):
    X, y, options = args
    return fit(X, y, options)


def fit_multi(X, Y, options: FitOptions | None = None, x_labels=(), y_labels=(),
              workers: int = 1) -> MultiGpModel:
    """Fit one GP per column of ``Y``.

    Output ``a`` is fitted with seed ``options.seed + a``, so results do not
    depend on ``workers``.
    """
    options = options or FitOptions()
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.asarray(Y, dtype=float).reshape(X.shape[0], -1)
    jobs = [(X, Y[:, a], replace(options, seed=options.seed + a)) for a in range(Y.shape[1])]
    failed = []
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_safe_fit, jobs))
    else:
        results = [_safe_fit(j) for j in jobs]
    for a, r in enumerate(results):
        if r is None:
            failed.append(y_labels[a] if a < len(y_labels) else str(a))
    if failed:
        raise AllRestartsFailed(f"fitting failed for outputs: {', '.join(failed)}")
    h = hashlib.sha256(X.tobytes())
    h.update(np.ascontiguousarray(Y).tobytes())
    return MultiGpModel(results, list(x_labels), list(y_labels), h.hexdigest()[:16])


def _safe_fit(job):
    try:
        return _fit_one(job)
    except AllRestartsFailed:
        return None


def predict_multi(model: MultiGpModel, x_star):
    """Mean vector and diagonal of the predictive covariance.

    For a batch ``x_star`` of shape ``(M, n_x)`` both results have shape
    ``(M, n_y)``.
    """
    out = [predict(m, x_star) for m in model.models]
    mean = np.array([o[0] for o in out])
    var = np.array([o[1] for o in out])
    if np.ndim(x_star) == 1:
        return mean, var
    return mean.T, var.T


__all__ = ["MultiGpModel", "fit_multi", "predict_multi"]
