"""Evaluator Agent - inference in eval mode and per-sample metric reports."""
from typing import List, Sequence, Tuple

from pbeunet.console import echo
from pbeunet.data_io import batch_samples
from pbeunet.layers import ModuleParams
from pbeunet.metrics import aggregate, evaluate
from pbeunet.models import AggregateReport, MetricReport, PbeConfig, PbeOutput, Sample
from pbeunet.network import pbe_forward
from pbeunet.tensor import Tensor, no_grad


def predict(params: ModuleParams, config: PbeConfig, images: Tensor) -> PbeOutput:
    """Eval-mode forward without recording a tape."""
    with no_grad():
        return pbe_forward(images, config, params, training=False)


class EvaluatorAgent:
    """Agent responsible for scoring a network on a set of samples."""

    def __init__(self, batch_size: int = 8, verbose: bool = True):
        self.batch_size = batch_size
        self.verbose = verbose

    def evaluate(
        self,
        params: ModuleParams,
        config: PbeConfig,
        samples: Sequence[Sample],
    ) -> Tuple[List[MetricReport], AggregateReport]:
        if self.verbose:
            echo(f"🤖 Evaluator Agent: Scoring {len(samples)} samples")
        reports = []
        for start in range(0, len(samples), self.batch_size):
            chunk = samples[start:start + self.batch_size]
            images, masks, _ = batch_samples(chunk)
            out = predict(params, config, images)
            for k, sample in enumerate(chunk):
                reports.append(evaluate(out.mask_prob.data[k:k + 1], masks.data[k:k + 1], sample.id))
        summary = aggregate(reports)
        if self.verbose:
            hd = "undefined" if summary.hd95 is None else f"{summary.hd95:.2f}px"
            echo(f"✅ Evaluator Agent: Dice {summary.dice:.4f}, IoU {summary.iou:.4f}, HD95 {hd}")
            if summary.hd95_undefined:
                echo(f"⚠️  Evaluator Agent: HD95 undefined for {summary.hd95_undefined} sample(s)")
        return reports, summary
