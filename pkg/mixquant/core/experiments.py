"""
Comparative experiments on toy models: normalization, asymmetric activations,
PACT, multi-token mixing, QAT recovery and weight bit-width, plus the
ConvMixer ablation grid

Each trend trains matched twins per seed and reports whether the expected
ordering holds for that seed; a trend holds when it holds for a majority
of seeds.
"""

from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Sequence, Tuple

import structlog

from ..models.config import (ActKind, ModelConfig, ModelFamily, NormKind, QuantConfig,
                             TrainConfig, TrainMode)
from ..models.dataset import Dataset
from ..models.mixer import MixerModel, build_model, count_params
from ..models.report import ExperimentRow
from .datasets import synth_dataset
from .observers import ObserverKind
from .pipeline import (calibrate_ptq, calibration_batches, evaluate, insert_fake_quant,
                       profile_activations, train)
from .quantizers import QuantScheme
from .rng import SplitMix64, derive_seed
from .sensitivity import block_report, sensitivity_summary

logger = structlog.get_logger(__name__)

# Accuracy slack for "no worse than" comparisons (fraction, i.e. 0.5 points)
ACCURACY_SLACK = 0.005
# Full-precision accuracy both norm-layer twins must reach before their PTQ drops are compared
FP_TARGET = 0.95
# Share of the PTQ gap to full precision that QAT fine-tuning must win back
QAT_RECOVERY = 0.5


@dataclass
class ExperimentSettings:
    """Sizes and schedule shared by every experiment run"""
    seeds: Tuple[int, ...] = (0, 1, 2)
    n_train: int = 1000
    n_test: int = 500
    noise: float = 0.3
    epochs: int = 6
    batch_size: int = 64
    learning_rate: float = 1e-3
    qat_epochs: int = 2
    qat_learning_rate: float = 2e-5
    depth: int = 4
    channels: int = 32
    calib_batches: int = 16
    calib_batch_size: int = 64
    sensitivity_samples: int = 8
    sensitivity_batch: int = 64
    threads: int = 1


@dataclass
class TrendResult:
    name: str
    rows: List[ExperimentRow] = field(default_factory=list)
    per_seed: List[bool] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return sum(self.per_seed) * 2 > len(self.per_seed)

    def add(self, seed: int, variant: str, metric: str, value: float):
        self.rows.append(ExperimentRow(experiment=self.name, seed=seed, variant=variant,
                                       metric=metric, value=float(value)))


def _data(settings: ExperimentSettings, seed: int, image_size: int = 16,
          classes: int = 10) -> Tuple[Dataset, Dataset]:
    train_set = synth_dataset(derive_seed(seed, 10), settings.n_train, classes, image_size, image_size, settings.noise)
    test_set = synth_dataset(derive_seed(seed, 20), settings.n_test, classes, image_size, image_size, settings.noise)
    return train_set, test_set


def _train_config(settings: ExperimentSettings, seed: int) -> TrainConfig:
    return TrainConfig(learning_rate=settings.learning_rate, qat_learning_rate=settings.qat_learning_rate,
                       epochs=settings.epochs, qat_epochs=settings.qat_epochs,
                       batch_size=settings.batch_size, seed=seed)


def _model_config(settings: ExperimentSettings, family: ModelFamily, **overrides) -> ModelConfig:
    base = dict(family=family, depth=settings.depth, channels=settings.channels,
                groups=1, norm=NormKind.LAYERNORM, act=ActKind.GELU)
    base.update(overrides)
    return ModelConfig(**base)


def _fit(config: ModelConfig, settings: ExperimentSettings, seed: int,
         data: Tuple[Dataset, Dataset]) -> Tuple[MixerModel, float]:
    model = build_model(config, seed=seed)
    trained = train(model, data[0], _train_config(settings, seed)).model
    return trained, evaluate(trained, data[1], threads=settings.threads)


def _ptq_accuracy(model: MixerModel, data: Tuple[Dataset, Dataset], settings: ExperimentSettings,
                  seed: int, **quant) -> float:
    qc = QuantConfig(calib_batches=settings.calib_batches, calib_batch_size=settings.calib_batch_size, **quant)
    quantized = calibrate_ptq(model, calibration_batches(data[0], qc, seed), qc)
    return evaluate(quantized, data[1], threads=settings.threads)


def _peak(model: MixerModel, dataset: Dataset) -> float:
    return max(r.max_abs for r in profile_activations(model, dataset))


def _layer_peaks(model: MixerModel, dataset: Dataset, edge_filter: Callable[[str], bool]) -> Dict[int, float]:
    """Largest |activation| per layer over the edges `edge_filter` selects"""
    peaks: Dict[int, float] = {}
    for row in profile_activations(model, dataset):
        if edge_filter(row.edge):
            peaks[row.layer] = max(peaks.get(row.layer, 0.0), row.max_abs)
    return peaks


def recovers_gap(fp: float, ptq: float, qat: float) -> bool:
    """QAT wins back at least QAT_RECOVERY of the accuracy PTQ lost"""
    return qat - ptq >= QAT_RECOVERY * (fp - ptq)


def peaks_bounded_per_layer(peaks: Dict[int, float], reference: Dict[int, float]) -> bool:
    """Every layer's peak is at most the reference peak of that layer"""
    return peaks.keys() == reference.keys() and all(peaks[layer] <= reference[layer] for layer in reference)


def norm_layer_trend(settings: ExperimentSettings) -> TrendResult:
    """ResMLP with a statistics-free affine norm against LayerNorm under W8A8 PTQ"""
    result = TrendResult('norm_layer')
    for seed in settings.seeds:
        data = _data(settings, seed)
        drops, peaks, trained = {}, {}, {}
        for norm in (NormKind.AFFINE, NormKind.LAYERNORM):
            model, fp = _fit(_model_config(settings, ModelFamily.RESMLP, norm=norm), settings, seed, data)
            q = _ptq_accuracy(model, data, settings, seed)
            drops[norm] = fp - q
            peaks[norm] = _peak(model, data[0].subset(slice(0, 256)))
            result.add(seed, norm.value, 'fp_top1', fp)
            result.add(seed, norm.value, 'w8a8_top1', q)
            result.add(seed, norm.value, 'peak_activation', peaks[norm])
            trained[norm] = fp >= FP_TARGET
            result.add(seed, norm.value, 'fp_target_met', float(trained[norm]))
        result.per_seed.append(
            all(trained.values())
            and drops[NormKind.LAYERNORM] <= drops[NormKind.AFFINE] + ACCURACY_SLACK
            and peaks[NormKind.LAYERNORM] <= peaks[NormKind.AFFINE])
    return result


def asymmetric_trend(settings: ExperimentSettings) -> TrendResult:
    """ConvMixer W8A8: asymmetric activations against symmetric"""
    result = TrendResult('asymmetric_activations')
    for seed in settings.seeds:
        data = _data(settings, seed)
        model, fp = _fit(_model_config(settings, ModelFamily.CONVMIXER, norm=NormKind.BATCHNORM),
                         settings, seed, data)
        sym = _ptq_accuracy(model, data, settings, seed, act_scheme=QuantScheme.SYMMETRIC)
        asym = _ptq_accuracy(model, data, settings, seed, act_scheme=QuantScheme.ASYMMETRIC)
        result.add(seed, 'fp', 'top1', fp)
        result.add(seed, 'symmetric', 'w8a8_top1', sym)
        result.add(seed, 'asymmetric', 'w8a8_top1', asym)
        result.per_seed.append(fp - asym <= fp - sym + ACCURACY_SLACK)
    return result


def pact_trend(settings: ExperimentSettings) -> TrendResult:
    """ConvMixer ReLU against PACT: per-layer activation peaks and W8A8 accuracy drop"""
    result = TrendResult('pact')
    act_edges = (lambda edge: edge.endswith('token_mixing.act'))
    for seed in settings.seeds:
        data = _data(settings, seed)
        drops, peaks = {}, {}
        for act in (ActKind.RELU, ActKind.PACT):
            config = _model_config(settings, ModelFamily.CONVMIXER, norm=NormKind.BATCHNORM, act=act)
            model, fp = _fit(config, settings, seed, data)
            q = _ptq_accuracy(model, data, settings, seed)
            drops[act] = fp - q
            peaks[act] = _layer_peaks(model, data[0].subset(slice(0, 256)), act_edges)
            result.add(seed, act.value, 'fp_top1', fp)
            result.add(seed, act.value, 'w8a8_top1', q)
            for layer, peak in sorted(peaks[act].items()):
                result.add(seed, act.value, f"layer{layer}_peak_activation", peak)
        result.per_seed.append(drops[ActKind.PACT] <= drops[ActKind.RELU] + ACCURACY_SLACK
                               and peaks_bounded_per_layer(peaks[ActKind.PACT], peaks[ActKind.RELU]))
    return result


def multi_token_trend(settings: ExperimentSettings, groups: int = 4) -> TrendResult:
    """Mixer with one token-mixing pair against `groups` pairs

    Per seed: the grouped twin has exactly `groups` times the token-mixing
    parameters, its FP accuracy is no lower, and on the single-group twin
    token-mixing blocks are at least as sensitive as channel-mixing blocks.
    """
    result = TrendResult('multi_token_mixing')
    for seed in settings.seeds:
        data = _data(settings, seed)
        traces, accuracy, token_params = {}, {}, {}
        for g in (1, groups):
            model, fp = _fit(_model_config(settings, ModelFamily.MIXER, groups=g), settings, seed, data)
            order = SplitMix64(derive_seed(seed, 30)).permutation(len(data[0]))[:settings.sensitivity_batch]
            batch = data[0].subset(order)
            rows = block_report(model, batch.images, batch.labels, settings.sensitivity_samples,
                                seed=seed, threads=settings.threads)
            traces[g] = sensitivity_summary(rows)
            accuracy[g] = fp
            token_params[g] = count_params(model).token_mixing
            variant = f"groups={g}"
            result.add(seed, variant, 'fp_top1', fp)
            result.add(seed, variant, 'token_mixing_params', token_params[g])
            result.add(seed, variant, 'token_mixing_normalized_trace', traces[g]['token_mixing'])
            result.add(seed, variant, 'channel_mixing_normalized_trace', traces[g]['channel_mixing'])
        result.per_seed.append(token_params[groups] == groups * token_params[1]
                               and accuracy[groups] >= accuracy[1]
                               and traces[1]['token_mixing'] >= traces[1]['channel_mixing'])
    return result


def qat_recovery_trend(settings: ExperimentSettings) -> TrendResult:
    """LayerNorm ResMLP at W4A8: QAT fine-tuning must win back QAT_RECOVERY of the PTQ gap"""
    result = TrendResult('qat_recovery')
    for seed in settings.seeds:
        data = _data(settings, seed)
        model, fp = _fit(_model_config(settings, ModelFamily.RESMLP), settings, seed, data)
        ptq = _ptq_accuracy(model, data, settings, seed, weight_bits=4)
        qc = QuantConfig(weight_bits=4, act_bits=8)
        tc = replace(_train_config(settings, seed), mode=TrainMode.QAT_FINETUNE)
        qat_model = train(insert_fake_quant(model, qc), data[0], tc).model
        qat = evaluate(qat_model, data[1], threads=settings.threads)
        result.add(seed, 'fp', 'top1', fp)
        result.add(seed, 'ptq', 'w4a8_top1', ptq)
        result.add(seed, 'qat', 'w4a8_top1', qat)
        result.per_seed.append(recovers_gap(fp, ptq, qat))
    return result


def weight_bits_trend(settings: ExperimentSettings, family: ModelFamily = ModelFamily.MIXER) -> TrendResult:
    """PTQ at W8A8 against W4A8 under identical calibration: fewer weight bits never help"""
    result = TrendResult(f"weight_bits_{family.value}")
    for seed in settings.seeds:
        data = _data(settings, seed)
        norm = NormKind.BATCHNORM if family is ModelFamily.CONVMIXER else NormKind.LAYERNORM
        model, fp = _fit(_model_config(settings, family, norm=norm), settings, seed, data)
        scores = {bits: _ptq_accuracy(model, data, settings, seed, weight_bits=bits) for bits in (8, 4)}
        result.add(seed, 'fp', 'top1', fp)
        for bits, top1 in scores.items():
            result.add(seed, f"w{bits}", f"w{bits}a8_top1", top1)
        result.per_seed.append(scores[8] + ACCURACY_SLACK >= scores[4])
    return result


def activation_comparison(settings: ExperimentSettings) -> TrendResult:
    """ConvMixer GELU against ReLU, full precision and W8A8"""
    result = TrendResult('activation_function')
    for seed in settings.seeds:
        data = _data(settings, seed)
        scores: Dict[ActKind, float] = {}
        for act in (ActKind.GELU, ActKind.RELU):
            config = _model_config(settings, ModelFamily.CONVMIXER, norm=NormKind.BATCHNORM, act=act)
            model, fp = _fit(config, settings, seed, data)
            scores[act] = _ptq_accuracy(model, data, settings, seed)
            result.add(seed, act.value, 'fp_top1', fp)
            result.add(seed, act.value, 'w8a8_top1', scores[act])
        result.per_seed.append(scores[ActKind.GELU] + ACCURACY_SLACK >= scores[ActKind.RELU])
    return result


def ablation_grid(settings: ExperimentSettings, seed: int = 0) -> List[ExperimentRow]:
    """ConvMixer with BatchNorm: every combination of percentile ranges,
    asymmetric activations and PACT, evaluated at W8A8"""
    data = _data(settings, seed)
    models: Dict[bool, MixerModel] = {}
    rows: List[ExperimentRow] = []
    for use_pact in (False, True):
        act = ActKind.PACT if use_pact else ActKind.GELU
        config = _model_config(settings, ModelFamily.CONVMIXER, norm=NormKind.BATCHNORM, act=act)
        models[use_pact], fp = _fit(config, settings, seed, data)
        rows.append(ExperimentRow('ablation', seed, f"pact={_flag(use_pact)}", 'fp_top1', fp))
    for use_percentile in (False, True):
        for use_asym in (False, True):
            for use_pact in (False, True):
                top1 = _ptq_accuracy(
                    models[use_pact], data, settings, seed,
                    observer=ObserverKind.PERCENTILE if use_percentile else ObserverKind.EMA,
                    act_scheme=QuantScheme.ASYMMETRIC if use_asym else QuantScheme.SYMMETRIC)
                variant = (f"percentile={_flag(use_percentile)},asymmetric={_flag(use_asym)},"
                           f"pact={_flag(use_pact)}")
                rows.append(ExperimentRow('ablation', seed, variant, 'w8a8_top1', top1))
                logger.info("Ablation variant evaluated", variant=variant, top1=round(top1, 4))
    return rows


def _flag(value: bool) -> str:
    return 'on' if value else 'off'


TRENDS: Dict[str, Callable[[ExperimentSettings], TrendResult]] = {
    'norm_layer': norm_layer_trend,
    'asymmetric_activations': asymmetric_trend,
    'pact': pact_trend,
    'multi_token_mixing': multi_token_trend,
    'qat_recovery': qat_recovery_trend,
    'weight_bits': weight_bits_trend,
    'activation_function': activation_comparison,
}


def run_trends(settings: ExperimentSettings, names: Sequence[str] = ()) -> List[TrendResult]:
    results = []
    for name in names or TRENDS:
        result = TRENDS[name](settings)
        logger.info("Trend finished", trend=name, passed=result.passed, per_seed=result.per_seed)
        results.append(result)
    return results
