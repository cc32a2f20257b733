"""Cloze-pattern few-shot classification toolkit.

Reformulate a classification task as cloze questions, finetune one masked-LM
copy per pattern on a handful of labeled examples, soft-label a large
unlabeled pool with the ensemble, and distill the result into a standard
classifier; iterate with growing training sets, or search for verbalizers
automatically.  A built-in trainable toy masked LM makes every step
verifiable on a laptop; real models plug in over a line-delimited JSON
protocol.
"""

from .avs import AvsConfig, avs_iterate, extract_multi_verbalizer, filter_candidates
from .backends import (
    BackendCapabilities,
    OracleBackend,
    RemoteBackend,
    ToyConfig,
    ToyMlmBackend,
    Vocabulary,
)
from .data import (
    Dataset,
    SyntheticTaskSpec,
    accuracy,
    build_few_shot_split,
    generate_synthetic_task,
    load_jsonl,
    macro_f1,
)
from .ensemble import (
    EnsembleConfig,
    SoftLabeledExample,
    build_soft_dataset,
    compute_weights,
    ensemble_scores,
    soft_label,
    train_final_classifier,
)
from .ipet import IpetConfig, bootstrap_zero_shot, run_ipet
from .pipeline import run_pet, run_supervised
from .pvp import (
    LabelSet,
    MaskedSequence,
    MultiVerbalizer,
    Pattern,
    Pvp,
    TextInput,
    Verbalizer,
    apply_pattern,
    parse_pattern_dsl,
    serialize_pattern,
)
from .task import TaskSpec, load_task_config
from .training import TrainConfig, TrainedPvpModel, evaluate_pvp, finetune_pvp

__version__ = "0.1.0"
