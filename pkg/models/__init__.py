from models.failure import FailureModel
from models.probe import ProbeModel
from models.run import DONE, FAILED, RUNNING, RunModel
