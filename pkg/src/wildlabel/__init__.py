"""wildlabel: build facial-expression datasets from noisy web queries, at desk scale.

Pipeline: harvest -> download -> gate -> sample -> annotate -> resolve ->
stats -> noise -> train -> eval -> report, plus a self-contained synthetic
benchmark (`wildlabel simulate`).
"""

__version__ = "0.1.0"
