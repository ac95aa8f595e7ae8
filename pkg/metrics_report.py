import logging
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ["mpjpe", "pa_mpjpe", "mpve", "smooth"]

# Published HUMBI numbers (MPJPE, PA-MPJPE, MPVE); reported as *_not_reproduced columns.
REFERENCE_RESULTS: Dict[str, Dict[str, tuple]] = {
    "views": {"1": (59.3, 43.2, 66.9), "2": (47.8, 33.9, 52.0), "3": (42.2, 31.6, 44.9),
              "4": (37.8, 27.5, 39.0)},
    "alignment": {"off": (41.4, 30.7, 43.7), "3d": (41.7, 29.5, 44.7),
                  "3d2d": (37.8, 27.5, 39.0), "3d2d+template": (38.9, 28.1, 40.3)},
    "fusion": {"conv1x1": (98.9, 86.8, 135.3), "strategyA": (40.3, 29.9, 46.7),
               "strategyB": (40.4, 30.1, 43.4), "mmt": (37.8, 27.5, 39.0)},
    "smooth": {"false": (37.8, 27.5, 39.0), "true": (37.4, 27.6, 43.3)},
}


class MetricsReporter:
    """Shape evaluation and ablation results into tables."""

    def evaluation_table(self, rows: List[Dict[str, Any]]) -> pd.DataFrame:
        """Per-sample metrics; one row per sample, sorted by sample index."""
        if not rows:
            return pd.DataFrame(columns=["sample"] + METRIC_COLUMNS)
        df = pd.DataFrame(rows)
        for col in METRIC_COLUMNS:
            if col not in df.columns:
                df[col] = np.nan
        df = df[["sample"] + METRIC_COLUMNS].sort_values("sample").reset_index(drop=True)
        logger.debug(f"Built evaluation table with {len(df)} samples")
        return df

    def means(self, table: pd.DataFrame) -> Dict[str, float]:
        return {col: float(table[col].mean()) for col in METRIC_COLUMNS}

    def with_mean_row(self, table: pd.DataFrame) -> pd.DataFrame:
        """Per-sample rows followed by a 'mean' row."""
        out = table.copy()
        out["sample"] = out["sample"].astype(str)
        mean = pd.DataFrame([{"sample": "mean", **self.means(table)}])
        return pd.concat([out, mean], ignore_index=True)

    def ablation_table(self, axis: str, rows: List[Dict[str, Any]]) -> pd.DataFrame:
        """One row per setting with its mean metrics and the published reference numbers."""
        df = pd.DataFrame(rows)
        references = REFERENCE_RESULTS.get(axis, {})
        ref = [references.get(str(s), (np.nan, np.nan, np.nan)) for s in df["setting"]]
        df.insert(0, "axis", axis)
        df["setting"] = df["setting"].astype(str)
        df["published_mpjpe_not_reproduced"] = [r[0] for r in ref]
        df["published_pa_mpjpe_not_reproduced"] = [r[1] for r in ref]
        df["published_mpve_not_reproduced"] = [r[2] for r in ref]
        logger.info(f"Built {axis} ablation table with {len(df)} settings")
        return df

    def to_csv(self, table: pd.DataFrame, path: Optional[str] = None) -> str:
        """Deterministic CSV text (fixed float format); written to `path` when given."""
        text = table.to_csv(index=False, float_format="%.6f", lineterminator="\n")
        if path is not None:
            with open(path, "w", encoding="utf-8", newline="") as f:
                f.write(text)
        return text
