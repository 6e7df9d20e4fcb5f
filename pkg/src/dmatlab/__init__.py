"""dmatlab: a desk-scale laboratory for dual-manifold adversarial robustness.

An exact synthetic image manifold (a frozen random generator), gradient
attacks in image space, latent space, and parameterized corruption families,
seven training regimes, and a reporting harness that reproduces the
qualitative robustness orderings between them.
"""

from .autodiff import (
    Graph,
    GraphError,
    Tensor,
    backward_grad,
    finite_diff_grad,
    forward_eval,
    project_ball,
    sign,
    value_and_grad,
)
from .models import (
    Architecture,
    FileFormatError,
    ModelParams,
    classifier_forward,
    generator_forward,
    init_params,
    load_checkpoint,
    make_generator,
    make_teacher,
    predict,
    save_checkpoint,
    teacher_label,
)
from .manifold import (
    DatasetConfig,
    NoiseConfig,
    ProjSolverConfig,
    SampleRecord,
    SampleSet,
    build_dataset,
    load_dataset,
    project_to_manifold,
    save_dataset,
)
from .attacks import (
    AttackSpec,
    CorruptionBasis,
    corruption_attack,
    default_suite,
    fgsm,
    lp_pgd,
    load_suite,
    mia,
    om_attack,
    om_fgsm,
    pgd,
    save_suite,
    worst_case_eval,
)
from .training import (
    TrainConfig,
    TrainRun,
    batch_loss,
    cyclic_lr,
    sgd_step,
    train,
)
from .harness import (
    ExperimentConfig,
    RobustnessReport,
    default_experiment_config,
    emit_report,
    evaluate,
    load_report,
    run_experiment,
    smoke_experiment_config,
    snapshot_curves,
)

__version__ = "0.1.0"
