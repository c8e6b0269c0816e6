"""Two-stage adversarial video generation.

Stage one generates optical flow from a latent vector; stage two colorizes
the flow into RGB video through masked foreground/background compositing.
The stages are trained independently and then coupled so the texture
discriminator's signal also shapes the flow generator. A synthetic
moving-shapes dataset with analytically exact flow makes the whole pipeline
testable at desk scale.
"""

from .core import (
    FLOW_SCALE, LATENT_DIM, ShapeError,
    composite, flow_composite, replicate_background,
    warp_frame, warp_video, flow_to_color,
)
from .synthdata import (
    SceneSpec, MotionSpec, BackgroundSpec, Sample, SceneSpecError, DatasetConfig,
    render_scene, analytic_flow, augment, make_dataset, SyntheticDataset, ClipDataset,
)
from .networks import (
    ArchConfig, FlowGenerator, TextureGenerator, FlowDiscriminator, TextureDiscriminator,
    init_weights, build_networks, parameter_gradients, restore_networks,
)
from .training import (
    TrainConfig, TrainingDiverged, StageMismatchError,
    gan_discriminator_loss, gan_generator_loss, mask_l1, joint_flow_generator_loss,
    adam_step, AdamOptimizer, lr_at, train_stage,
)
from .evaluation import (
    EvalReport, FeatureRecord, extract_features, train_linear_classifier,
    fuse_and_classify, motion_energy, warp_consistency, evaluate_representation,
)
from .fileio import (
    Checkpoint, save_checkpoint, load_checkpoint, save_clip, load_clip,
    export_gif, export_panel,
)

__version__ = "0.1.0"
