"""
Command handlers behind the CLI verbs
"""

from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import structlog

from ..core.datasets import dataset_from_config
from ..core.errors import ContractError, MixQuantError
from ..core.experiments import ExperimentSettings, ablation_grid
from ..core.persistence import load_checkpoint, read_report, save_checkpoint, write_report
from ..core.pipeline import (FULL_PRECISION, calibrate_ptq, calibration_batches, evaluate,
                             insert_fake_quant, metric_row, profile_activations, train)
from ..core.rng import SplitMix64, derive_seed
from ..core.sensitivity import block_report
from ..models.config import RunConfig, TrainMode
from ..models.dataset import Dataset
from ..models.mixer import MixerModel, build_model
from ..models.report import MetricRow

logger = structlog.get_logger(__name__)


class CommandsAPI:
    """One method per CLI verb; each returns a result dict with a status code

    status 0 is success, 2 a runtime or I/O failure (the error text is in
    "error").
    """

    def __init__(self, config: RunConfig, out_dir: Optional[str] = None):
        self.config = config
        self.out_dir = Path(out_dir or config.output.directory)
        self._data: Optional[Tuple[Dataset, Dataset]] = None

    # Helpers

    def _path(self, name: str) -> Path:
        return self.out_dir / name

    def _report_path(self, stem: str) -> Path:
        return self._path(self.config.output.report_path(stem))

    def _datasets(self) -> Tuple[Dataset, Dataset]:
        if self._data is None:
            self._data = dataset_from_config(self.config.data, self.config.model)
        return self._data

    def _train_from_scratch(self) -> Tuple[MixerModel, List[Path]]:
        cfg = self.config
        train_set, _ = self._datasets()
        model = build_model(cfg.model, seed=cfg.train.seed)
        result = train(model, train_set, cfg.train)
        checkpoint = self._path(cfg.output.checkpoint)
        save_checkpoint(checkpoint, result.model.state_dict())
        losses = write_report(result.losses, self._report_path('loss_curve')) if result.losses else None
        logger.info("✅ Checkpoint saved", path=str(checkpoint))
        return result.model, [p for p in (checkpoint, losses) if p is not None]

    def _load_model(self) -> MixerModel:
        """The trained model from the output directory, training one if none exists"""
        checkpoint = self._path(self.config.output.checkpoint)
        if not checkpoint.exists():
            logger.warning("Checkpoint missing, training from scratch", path=str(checkpoint))
            model, _ = self._train_from_scratch()
            return model
        model = build_model(self.config.model, seed=self.config.train.seed)
        model.load_state_dict(load_checkpoint(checkpoint))
        logger.info("Checkpoint loaded", path=str(checkpoint), model=model.name)
        return model

    def _run(self, action: str, fn) -> Dict[str, Any]:
        try:
            return fn()
        except (MixQuantError, OSError) as e:
            logger.error(f"Failed to {action}", error=str(e), error_type=type(e).__name__)
            return {"error": str(e), "status": 2}

    # Verbs

    def train(self) -> Dict[str, Any]:
        return self._run("train", self._train)

    def _train(self) -> Dict[str, Any]:
        cfg = self.config
        train_set, test_set = self._datasets()
        threads = cfg.output.threads
        if cfg.train.mode is TrainMode.FROM_SCRATCH:
            model, artifacts = self._train_from_scratch()
            row = metric_row(model, FULL_PRECISION,
                             evaluate(model, test_set, cfg.output.eval_batch_size, threads))
        else:
            base_path = self._path(cfg.output.checkpoint)
            if not base_path.exists():
                raise ContractError(f"qat_finetune needs a trained checkpoint at {base_path}")
            base = self._load_model()
            result = train(insert_fake_quant(base, cfg.quant), train_set, cfg.train)
            checkpoint = self._path(cfg.output.qat_checkpoint)
            save_checkpoint(checkpoint, result.model.model.state_dict())
            artifacts = [checkpoint, write_report(result.losses, self._report_path('qat_loss_curve'))]
            row = metric_row(base, cfg.quant,
                             evaluate(result.model, test_set, cfg.output.eval_batch_size, threads))
        artifacts.append(write_report([row], self._report_path('train_metrics')))
        return {"status": 0, "metrics": [row.to_dict()], "artifacts": [str(p) for p in artifacts]}

    def calibrate(self) -> Dict[str, Any]:
        return self._run("calibrate", self._calibrate)

    def _calibrate(self) -> Dict[str, Any]:
        cfg = self.config
        train_set, _ = self._datasets()
        model = self._load_model()
        quantized = calibrate_ptq(model, calibration_batches(train_set, cfg.quant, cfg.data.seed), cfg.quant)
        ranges = quantized.range_rows()
        artifacts = []
        if ranges:
            artifacts.append(write_report(ranges, self._report_path('ranges')))
        qparams = [{"name": name, **qp.to_dict()} for name, qp in quantized.state.act_qparams.items()]
        qparams += [{"name": name, **qp.to_dict()} for name, qp in quantized.state.weight_qparams.items()]
        if qparams:
            artifacts.append(write_report(qparams, self._path('qparams.json'), 'json'))
        return {"status": 0, "edges": len(ranges), "artifacts": [str(p) for p in artifacts]}

    def quantize(self) -> Dict[str, Any]:
        return self._run("quantize", self._quantize)

    def _quantize(self) -> Dict[str, Any]:
        cfg = self.config
        train_set, test_set = self._datasets()
        model = self._load_model()
        threads, batch = cfg.output.threads, cfg.output.eval_batch_size
        quantized = calibrate_ptq(model, calibration_batches(train_set, cfg.quant, cfg.data.seed), cfg.quant)
        rows = [
            metric_row(model, FULL_PRECISION, evaluate(model, test_set, batch, threads)),
            metric_row(model, cfg.quant, evaluate(quantized, test_set, batch, threads)),
        ]
        path = write_report(rows, self._report_path('metrics'))
        return {"status": 0, "metrics": [r.to_dict() for r in rows], "artifacts": [str(path)]}

    def eval(self) -> Dict[str, Any]:
        return self._run("evaluate", self._eval)

    def _eval(self) -> Dict[str, Any]:
        cfg = self.config
        _, test_set = self._datasets()
        model = self._load_model()
        row = metric_row(model, FULL_PRECISION,
                         evaluate(model, test_set, cfg.output.eval_batch_size, cfg.output.threads))
        path = write_report([row], self._report_path('eval'))
        return {"status": 0, "metrics": [row.to_dict()], "artifacts": [str(path)]}

    def sensitivity(self) -> Dict[str, Any]:
        return self._run("compute sensitivity", self._sensitivity)

    def _sensitivity(self) -> Dict[str, Any]:
        cfg = self.config
        train_set, _ = self._datasets()
        model = self._load_model()
        order = SplitMix64(derive_seed(cfg.data.seed, 30)).permutation(len(train_set))
        batch = train_set.subset(order[:cfg.output.sensitivity_batch])
        rows = block_report(model, batch.images, batch.labels, cfg.output.sensitivity_samples,
                            seed=cfg.train.seed, eps=cfg.output.fd_eps, threads=cfg.output.threads)
        if not rows:
            raise ContractError("model has no layers to analyse")
        path = write_report(rows, self._report_path('sensitivity'))
        return {"status": 0, "rows": len(rows), "artifacts": [str(path)]}

    def profile(self) -> Dict[str, Any]:
        return self._run("profile activations", self._profile)

    def _profile(self) -> Dict[str, Any]:
        cfg = self.config
        train_set, _ = self._datasets()
        model = self._load_model()
        count = cfg.quant.calib_batches * cfg.quant.calib_batch_size
        rows = profile_activations(model, train_set.subset(slice(0, count)),
                                   cfg.output.profile_percentile, cfg.output.eval_batch_size)
        path = write_report(rows, self._report_path('profile'))
        return {"status": 0, "rows": len(rows), "artifacts": [str(path)]}

    def report(self, inputs: Sequence[str]) -> Dict[str, Any]:
        return self._run("build report", lambda: self._report(inputs))

    def _report(self, inputs: Sequence[str]) -> Dict[str, Any]:
        if not inputs:
            raise ContractError("report needs at least one metrics file")
        rows: List[MetricRow] = []
        seen = set()
        for path in inputs:
            for record in read_report(path):
                row = MetricRow.from_dict(record)
                key = (row.model, row.precision)
                if key in seen:
                    logger.warning("Duplicate metric row skipped", model=row.model, precision=row.precision)
                    continue
                seen.add(key)
                rows.append(row)
        path = write_report(rows, self._report_path('report'))
        return {"status": 0, "table": format_table(rows), "artifacts": [str(path)]}

    def ablation(self) -> Dict[str, Any]:
        return self._run("run ablation", self._ablation)

    def _ablation(self) -> Dict[str, Any]:
        cfg = self.config
        settings = ExperimentSettings(
            seeds=(cfg.train.seed,), n_train=cfg.data.n_train, n_test=cfg.data.n_test,
            noise=cfg.data.noise, epochs=cfg.train.epochs, batch_size=cfg.train.batch_size,
            learning_rate=cfg.train.learning_rate, depth=cfg.model.depth, channels=cfg.model.channels,
            calib_batches=cfg.quant.calib_batches, calib_batch_size=cfg.quant.calib_batch_size,
            threads=cfg.output.threads)
        rows = ablation_grid(settings, seed=cfg.train.seed)
        path = write_report(rows, self._report_path('ablation'))
        return {"status": 0, "rows": len(rows), "artifacts": [str(path)]}


def format_table(rows: Sequence[MetricRow]) -> str:
    """Aligned text table of metric rows"""
    header = ('model', 'precision', 'size_mb', 'bops_g', 'top1')
    body = [(r.model, r.precision, f"{r.size_mb:.4f}", f"{r.bops_g:.6f}", f"{100 * r.top1:.2f}")
            for r in rows]
    widths = [max(len(str(line[i])) for line in [header] + body) for i in range(len(header))]
    lines = ["  ".join(str(cell).ljust(w) for cell, w in zip(line, widths)).rstrip()
             for line in [header] + body]
    return "\n".join(lines)
