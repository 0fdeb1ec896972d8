from .domain import DiscretizationPlan, FeatureSpace, MessageLog, UserSet, load_messages, load_users
from .errors import ConfigError, DataError, MatchlibError
from .lda import Hyperparams, Schedule, TrainedModel, preference, train
from .market import build_market, extract_recommendations, solve_max_utility, verify_plan
from .run_config import RunConfig
