from metastasis_ewc_pytorch.archnet import (
    NetConfig,
    DenseNet,
    build_network,
    trace_shapes,
    receptive_field,
    save_checkpoint,
    load_checkpoint,
    load_network
)

from metastasis_ewc_pytorch.augment import (
    AugConfig,
    augment_patch,
    dihedral8
)

from metastasis_ewc_pytorch.sampler import (
    SlideRecord,
    DatasetManifest,
    PatchSpec,
    sample_patch
)

from metastasis_ewc_pytorch.continual import (
    FisherAnchor,
    EwcConfig,
    ewc_loss,
    ewc_grad,
    estimate_fisher,
    PLANS,
    get_plan,
    run_strategy
)

from metastasis_ewc_pytorch.synthwsi import (
    SynthConfig,
    generate_slide,
    generate_dataset
)

from metastasis_ewc_pytorch.infermap import (
    LikelihoodMap,
    infer_map,
    infer_tta
)

from metastasis_ewc_pytorch.postproc import (
    MetastasisClass,
    PnStage,
    nms,
    extract_features,
    pn_stage
)

from metastasis_ewc_pytorch.forest import (
    forest_train,
    forest_predict
)

from metastasis_ewc_pytorch.evalstat import (
    froc,
    roc_auc,
    kappa_quadratic,
    bootstrap
)
