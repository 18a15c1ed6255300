"""Cross-quality instance-aware adaptation pipeline.

Synthetic RGBD world -> voxel semantic map with pseudo-labels -> object-image
database (many low-quality robot crops, few high-quality user images) ->
contrastive fine-tuning -> cosine instance retrieval and navigation goals.
"""

from .adapters import DeblurrerHandle, SegmenterHandle, deblur, segment
from .database import (CollectionConfig, CropRecord, InstanceEntry,
                       ObjectImageDatabase, add_user_images, collect_database,
                       load_database, save_database)
from .errors import (BackendError, CannotSample, ConfigError, FormatError,
                     GoalUnreachable, IntegrityError, InvalidArgument,
                     MissingArtifact, NotFound, NumericError, PipelineError)
from .evaluation import (EvalReport, Query, TrialResult, compute_metrics,
                         cross_domain_alignment, evaluate_bundle,
                         export_latent_projection, failed_report,
                         few_shot_ablation, format_metrics_row,
                         format_report_table, plot_benchmark, plot_latent,
                         project_latent, run_benchmark, save_reports)
from .geometry import (CameraIntrinsics, CameraPose, Trajectory, backproject,
                       load_trajectory, look_at_pose, pixel_ray_directions,
                       save_trajectory)
from .learning import (ArchitectureConfig, AugmentParams, ContrastivePair,
                       EncoderBundle, GradReverse, LossBreakdown, PairBatch,
                       TrainingConfig, adversarial_term, augment_image,
                       augment_views,
                       build_pairs, calibrate_feature_center,
                       config_fingerprint, grad_reverse,
                       images_to_tensor, load_bundle, loss_cross, loss_robot,
                       loss_total, paper_training_config, save_bundle, train)
from .mapping import (BBox, NavGoal, SegmentMask, VoxelCell, VoxelSemanticMap,
                      associate_labels, instance_centroid, integrate_frame,
                      load_map, mask_to_bboxes, match_instance, raytrace_mask,
                      resolve_nav_goal, save_map, trace_rays)
from .retrieval import (EmbeddingVector, RankingResult, build_embedding_index,
                        cosine_similarity, db_digest, embed, load_embedding_index,
                        locate, rank_instances, save_embedding_index)
from .world import (Aabb, DegradationSpec, RgbdFrame, SceneDescription,
                    SceneObject, closeup_poses, degrade, generate_scene,
                    load_scene, orbit_trajectory, psnr, render_frame,
                    render_sequence, save_scene, survey_trajectory)

__version__ = "0.1.0"
