"""Channel charting from Doppler-induced differential phases.

Learns a forward charting function (CSI matrix -> 2-D position) from the
pairwise log-likelihood of differential phase changes between distributed,
frequency-synchronized single-antenna receivers.  Ships with a synthetic
channel simulator as ground-truth oracle, dissimilarity-metric baselines
and a full evaluation suite.
"""

from .baselines import (DissimilarityMatrix, GeodesicMatrix, align_mean_delay,
                        cira_dissimilarity, cira_matrix, fuse_with_timestamps,
                        geodesic)
from .dataset import (CsiDataset, Datapoint, SystemConfig, apply_feature_desync,
                      desynchronize_dataset, desynchronize_features,
                      read_dataset, read_dataset_file, split_train_test,
                      write_dataset, write_dataset_file)
from .doppler_loss import (PairSample, UncertaintyModel, attach_uncertainty,
                           delta_distance, instantaneous_uncertainty,
                           pair_loss, pair_sample, sigma,
                           uncertainty_from_dataset)
from .evaluation import (AffineTransform, EvalReport, chart_quality,
                         error_metrics, evaluate_chart, export_chart,
                         fit_affine)
from .fcf import (FcfModel, FeatureSpec, estimate_positions, extract_features,
                  forward, backward, initialize_model, load_model,
                  load_model_file, predict, save_model, save_model_file)
from .phase import (PhaseTrack, differential_phase, extract_csi_phase,
                    integrate_offsets, refine_with_csi, wrap_to_pi)
from .sim import (SimScenario, Trajectory, default_scenario, generate_trajectory,
                  load_scenario, rms_delay_spread, simulate_dataset,
                  synthesize_csi)
from .trainer import (TrainSchedule, TrainingReport, sample_pairs,
                      train_dissimilarity, train_doppler)

__version__ = "0.1.0"
