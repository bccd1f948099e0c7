"""Shared test fixtures: the three-leaf MPG worked-example tree.

Reading of the tree: year >= 2019 gives 24 MPG; otherwise engines under
3891 cc give 25 MPG and engines at or above give 30 MPG. Internally the
root keeps the "value < threshold goes left" convention, so the 24-MPG
leaf is the root's right child.
"""

import json


def worked_example_document() -> dict:
    return {
        "format": "fleetemit-tree",
        "version": 1,
        "target_kind": "mpg",
        "feature_names": ["Year", "CC"],
        "feature_kinds": ["numeric", "numeric"],
        "params": {"cp": 1e-4, "minsplit": 25, "minbucket": 100,
                   "xval": 10, "max_depth": 30, "seed": 0},
        "root_deviance": 4840.0,
        "nodes": [
            {"id": 0, "n": 1000, "mean": 25.7, "deviance": 4840.0,
             "split": {"feature": 0, "threshold": 2019.0},
             "alpha": 0.7, "left": 1, "right": 4},
            {"id": 1, "n": 700, "mean": 26.428571428571427, "deviance": 3591.4,
             "split": {"feature": 1, "threshold": 3891.0},
             "alpha": 0.2, "left": 2, "right": 3},
            {"id": 2, "n": 500, "mean": 25.0, "deviance": 12.0},
            {"id": 3, "n": 200, "mean": 30.0, "deviance": 8.0},
            {"id": 4, "n": 300, "mean": 24.0, "deviance": 10.0},
        ],
        "cp_table": [
            {"cp": 0.7, "nsplit": 0, "rel_error": 1.0, "xerror": None, "xstd": None},
            {"cp": 0.2, "nsplit": 1, "rel_error": 0.3, "xerror": None, "xstd": None},
            {"cp": 0.0001, "nsplit": 2, "rel_error": 0.1, "xerror": None, "xstd": None},
        ],
    }


def worked_example_bytes() -> bytes:
    return json.dumps(worked_example_document()).encode("utf-8")


# (year, cc) inputs and the MPG the worked example assigns them
WORKED_EXAMPLE_CASES = [
    ((2020.0, 2000.0), 24.0),
    ((2019.0, 5000.0), 24.0),
    ((2015.0, 2000.0), 25.0),
    ((2010.0, 3891.0), 30.0),
    ((2010.0, 3890.0), 25.0),
    ((2018.0, 4200.0), 30.0),
]
