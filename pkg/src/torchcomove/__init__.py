from .evaluation import SimWeights, cluster_matching  # noqa
from .evolving import DetectionParams, EvolvingCluster, EvolvingClusters, TimeSlice  # noqa
from .flp import ConstantVelocityPredictor, GruPredictor, PredictorConfig  # noqa
from .geo import TimestampedPoint, Trajectory  # noqa
from .pipeline import OnlinePipeline, PipelineConfig, run_online  # noqa
