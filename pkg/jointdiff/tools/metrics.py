# jointdiff/tools/metrics.py
import logging
from dataclasses import dataclass
from typing import Dict, List, Literal, Optional, Sequence

import numpy as np
from rich.table import Table

from jointdiff.data.synthdata import GeneratorConfig, oracle_age, oracle_sex

logger = logging.getLogger(__name__)

Kind = Literal["regression", "classification"]


@dataclass
class MetricReport:
    kind: str
    n: int
    mae: Optional[float] = None
    mae_std: Optional[float] = None
    accuracy: Optional[float] = None
    mean_sample_variance: Optional[float] = None

    def as_dict(self) -> Dict[str, Optional[float]]:
        return {
            "kind": self.kind,
            "n": self.n,
            "mae": self.mae,
            "mae_std": self.mae_std,
            "accuracy": self.accuracy,
            "mean_sample_variance": self.mean_sample_variance,
        }

    def summary(self) -> str:
        if self.kind == "classification":
            return f"ACC {self.accuracy:.3f}"
        text = f"MAE {self.mae:.2f} ± {self.mae_std:.2f}"
        if self.mean_sample_variance is not None:
            text += f", mean sample variance {self.mean_sample_variance:.2f}"
        return text


def eval_metrics(predictions: Sequence, targets: Sequence, kind: Kind,
                 samples: Optional[Sequence[Sequence[float]]] = None) -> MetricReport:
    """Regression: MAE mean ± std (+ mean unbiased sample variance); classification: accuracy."""
    preds = np.asarray(predictions)
    truth = np.asarray(targets)
    if preds.size == 0:
        raise ValueError("Cannot evaluate empty predictions")
    if preds.shape != truth.shape:
        raise ValueError(f"Predictions ({preds.shape}) and targets ({truth.shape}) differ in length")

    if kind == "classification":
        return MetricReport(kind, int(preds.size), accuracy=float(np.mean(preds == truth)))
    if kind != "regression":
        raise ValueError(f"kind must be 'regression' or 'classification', got {kind!r}")

    errors = np.abs(preds.astype(np.float64) - truth.astype(np.float64))
    report = MetricReport(kind, int(preds.size), mae=float(errors.mean()), mae_std=float(errors.std()))
    if samples is not None:
        draws = np.asarray(samples, dtype=np.float64)
        if draws.ndim != 2 or draws.shape[0] != preds.size:
            raise ValueError(f"Samples must be (n, S) with n = {preds.size}, got {draws.shape}")
        if draws.shape[1] > 1:
            report.mean_sample_variance = float(draws.var(axis=1, ddof=1).mean())
    return report


def metrics_table(rows: Dict[str, MetricReport], title: str, method: str = "joint diffusion") -> Table:
    """One row per conditioning set with MAE, ACC and sample-variance columns."""
    table = Table(title=title, show_header=True)
    table.add_column("Method", style="cyan")
    table.add_column("Known", style="cyan")
    table.add_column("MAE ± std", style="green", justify="right")
    table.add_column("ACC", style="green", justify="right")
    table.add_column("Mean sample variance", style="yellow", justify="right")
    for known, report in rows.items():
        table.add_row(
            method,
            known,
            "-" if report.mae is None else f"{report.mae:.2f} ± {report.mae_std:.2f}",
            "-" if report.accuracy is None else f"{report.accuracy:.3f}",
            "-" if report.mean_sample_variance is None else f"{report.mean_sample_variance:.2f}",
        )
    return table


def records_table(ages: Sequence[float], sexes: Sequence[int], files: Sequence[str], title: str) -> Table:
    table = Table(title=title, show_header=True)
    table.add_column("#", style="cyan", justify="right")
    table.add_column("Age", style="green", justify="right")
    table.add_column("Sex", style="green", justify="right")
    table.add_column("Image", style="blue")
    for i, (age, sex, name) in enumerate(zip(ages, sexes, files)):
        table.add_row(str(i), f"{age:.2f}", str(sex), name)
    return table


@dataclass
class MarginalReport:
    """Moments of sampled records next to the same moments of a reference set.

    Image statistics go through the phantom oracles, so `coherence_*` say
    whether each sampled image agrees with the age and sex sampled with it.
    """

    n: int
    pixel_mean: float
    pixel_std: float
    oracle_age_mean: float
    oracle_sex_share: float
    age_mean: float
    sex_share: float
    coherence_age_mae: float
    coherence_sex_accuracy: float
    empty_images: int = 0

    def as_dict(self) -> Dict[str, float]:
        return {name: getattr(self, name) for name in self.__dataclass_fields__}


def _oracle_ages(images: np.ndarray, cfg: GeneratorConfig) -> np.ndarray:
    ages = np.full(len(images), np.nan)
    for i, image in enumerate(images):
        try:
            ages[i] = oracle_age(image, cfg)
        except ValueError:
            pass
    return ages


def marginal_report(images: Sequence[np.ndarray], ages: Sequence[float], sexes: Sequence[int],
                    cfg: GeneratorConfig) -> MarginalReport:
    """Pixel moments, oracle-decoded marginals and image/label coherence of a record set.

    Args:
        images: (n, side, side) grids in [-1, 1].
        ages: Age attached to each image, in years.
        sexes: Category attached to each image.
        cfg: GeneratorConfig the oracles decode with.
    """
    images = np.asarray(images, dtype=np.float64)
    ages = np.asarray(ages, dtype=np.float64)
    sexes = np.asarray(sexes)
    if images.ndim != 3 or len(images) == 0:
        raise ValueError(f"Expected a non-empty (n, side, side) stack, got shape {images.shape}")
    if not len(images) == len(ages) == len(sexes):
        raise ValueError("images, ages and sexes must have equal lengths")

    decoded_ages = _oracle_ages(images, cfg)
    decoded_sexes = np.array([oracle_sex(image, cfg) for image in images])
    found = ~np.isnan(decoded_ages)
    empty = int(np.sum(~found))
    if empty:
        logger.warning(f"{empty} of {len(images)} images have no foreground; excluded from age moments")
    return MarginalReport(
        n=len(images),
        pixel_mean=float(images.mean()),
        pixel_std=float(images.std()),
        oracle_age_mean=float(decoded_ages[found].mean()) if found.any() else float("nan"),
        oracle_sex_share=float(np.mean(decoded_sexes == 0)),
        age_mean=float(ages.mean()),
        sex_share=float(np.mean(sexes == 0)),
        coherence_age_mae=float(np.abs(decoded_ages[found] - ages[found]).mean()) if found.any() else float("nan"),
        coherence_sex_accuracy=float(np.mean(decoded_sexes == sexes)),
        empty_images=empty,
    )


def marginals_table(samples: MarginalReport, reference: MarginalReport, title: str) -> Table:
    table = Table(title=title, show_header=True)
    table.add_column("Statistic", style="cyan")
    table.add_column("Samples", style="green", justify="right")
    table.add_column("Reference", style="yellow", justify="right")
    for label, name, fmt in (
        ("Pixel mean", "pixel_mean", "{:.3f}"),
        ("Pixel std", "pixel_std", "{:.3f}"),
        ("Mean age (oracle on image)", "oracle_age_mean", "{:.2f}"),
        ("Share sex 0 (oracle on image)", "oracle_sex_share", "{:.3f}"),
        ("Mean age (label)", "age_mean", "{:.2f}"),
        ("Share sex 0 (label)", "sex_share", "{:.3f}"),
        ("Image/age MAE", "coherence_age_mae", "{:.2f}"),
        ("Image/sex agreement", "coherence_sex_accuracy", "{:.3f}"),
    ):
        table.add_row(label, fmt.format(getattr(samples, name)), fmt.format(getattr(reference, name)))
    return table
