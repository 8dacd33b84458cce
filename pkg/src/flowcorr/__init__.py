"""Dense shape correspondence by composing per-shape flows through a shared Gaussian."""

__version__ = "0.1.0"

from .embedding import (EmbeddingMatrix, NormalizationTransform, geodesic_embedding, load_embedding,
                        save_embedding, standardize, xyz_embedding)
from .errors import FlowCorrError
from .flow import (FlowModel, TrainConfig, VelocityField, cfm_loss_grad, eval_velocity, integrate_backward,
                   integrate_forward, load_model, save_model, train_flow)
from .geodesics import GeodesicGraph, build_graph, landmark_distances, single_source
from .geometry import (Mesh, PointCloud, SampleSet, SdfGrid, load_shape, mesh_to_sdf, sample_surface)
from .matching import (Correspondence, compose_map, match, match_fuse, match_knn, match_knn_in_gauss,
                       match_sinkhorn, nearest_search, sinkhorn)
from .metrics import (EvalReport, coverage, dirichlet_energy, euclidean_error, evaluate_pair, geodesic_error,
                      js_hist, kl_knn)
