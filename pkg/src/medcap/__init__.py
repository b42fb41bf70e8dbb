"""medcap: teacher-distilled medical captioning corpus builder and evaluator."""

__version__ = "0.1.0"
