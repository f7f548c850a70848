"""Parcel-wise multimodal brain-encoding toolkit.

Implements two encoder families over TR-aligned modality feature series:
a lagged per-parcel linear regression and an attention-based fusion
network, plus the PCA/lag input preparation, Pearson evaluation harness,
synthetic-data oracle, and binary file formats that tie them together.
"""

from .io import (
    BoldSeries,
    DatasetSplit,
    DataError,
    FeatureSeries,
    FormatError,
    read_bold_file,
    read_feature_file,
    read_split,
    write_bold_file,
    write_feature_file,
    write_split,
)
from .lagged import DesignMatrix, LagConfig, align_targets, build_design
from .pca import PcaModel, pca_fit, pca_transform
from .linear import (
    LinearEncoderModel,
    SingularFitError,
    fit_linear,
    fit_linear_pipeline,
    load_linear_model,
    predict_linear,
    save_linear_model,
)
from .attention import (
    AttentionConfig,
    AttentionEncoderModel,
    load_attention_model,
    save_attention_model,
    train,
)
from .evaluation import (
    EvalReport,
    ParcelScores,
    UndefinedCorrelationError,
    aggregate,
    export_report,
    pearson,
    score_parcels,
)
from .synth import SynthSpec, generate, kernel_recovery_error

__version__ = "0.1.0"
