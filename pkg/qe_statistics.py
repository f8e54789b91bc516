from typing import Sequence

import pandas as pd
import numpy as np

from noisy_quant.noisy_linear import LAYER_TYPES, QEReport
from utils.exceptions import InvalidArgumentError


class QEStatistics:
    """A class for aggregating quantization error reports by layer type.

    Parameters
    ----------
    reports : Sequence[QEReport] or pd.DataFrame
        The per-layer reports. A pd.DataFrame must hold the columns of
        `QEReport.to_dict`.
    noisy_only : bool, optional
        Whether to aggregate only the layers that carry noise.
        The default is False.

    Attributes
    ----------
    dataframe : pd.DataFrame
        One row per layer.

    Methods
    -------
    calculate_all_statistics(precision: int = 6) -> pd.DataFrame
        Calculate the per-layer-type table, rounded.

    layer_type_summary() -> pd.DataFrame
        Mean errors per layer type.

    calculate_output_drop() -> pd.Series
        Relative output error reduction per layer type, in percent.

    """
    required_columns = [
        "layer", "layer_type", "n", "input_qe", "input_qe_noisy", "D",
        "output_qe", "output_qe_noisy",
    ]

    def __init__(
        self,
        reports: Sequence[QEReport] | pd.DataFrame,
        noisy_only: bool = False,
    ):
        if isinstance(reports, pd.DataFrame):
            dataframe = reports.copy()
        else:
            dataframe = pd.DataFrame([report.to_dict() for report in reports])

        missing = [
            column for column in self.required_columns
            if column not in dataframe.columns
        ]
        if missing and not dataframe.empty:
            raise InvalidArgumentError(
                f"Invalid reports. Missing column(s): {missing}"
            )

        if noisy_only and not dataframe.empty:
            dataframe = dataframe.query("n > 0")

        self.dataframe = dataframe.reindex(columns=self.required_columns)

    def layer_type_summary(self) -> pd.DataFrame:
        """
        Mean errors per layer type.

        Returns
        -------
        pd.DataFrame
            Indexed by layer type, in qkv, proj, fc1, fc2, other order,
            with the layer count, the noisy layer count, the mean input
            and output errors, the mean D and the output drop.
        """
        grouped = self.dataframe.groupby("layer_type")

        summary = grouped[
            ["input_qe", "input_qe_noisy", "D", "output_qe", "output_qe_noisy"]
        ].mean()
        summary.insert(0, "Noisy_Layers", grouped["n"].apply(lambda n: int((n > 0).sum())))
        summary.insert(0, "Layers", grouped.size())

        order = [layer for layer in LAYER_TYPES if layer in summary.index]
        summary = summary.reindex(order)
        summary.index.name = "layer_type"

        summary["drop_pct"] = self.calculate_output_drop(summary)
        return summary

    def calculate_output_drop(self, summary: pd.DataFrame | None = None) -> pd.Series:
        """
        Relative output error reduction per layer type, in percent.

        Returns
        -------
        pd.Series
            100 * (output_qe - output_qe_noisy) / output_qe, 0 where
            the baseline error is 0.

        """
        if summary is None:
            summary = self.dataframe.groupby("layer_type")[
                ["output_qe", "output_qe_noisy"]
            ].mean()

        baseline = summary["output_qe"]
        drop = 100 * (baseline - summary["output_qe_noisy"]) / baseline
        return pd.Series(
            np.where(baseline > 0, drop, 0.0), index=summary.index, name="drop_pct"
        )

    def calculate_all_statistics(self, precision: int = 6) -> pd.DataFrame:
        """
        Calculate the per-layer-type table with a total row.

        Parameters
        ----------
        precision : int, optional
            The number of decimal places to round the calculated
            statistics to. Defaults to 6.

        Returns
        -------
        pd.DataFrame
            The layer type summary followed by an "all" row that sums
            the layer counts and averages the errors over every layer.
        """
        summary = self.layer_type_summary()
        errors = ["input_qe", "input_qe_noisy", "D", "output_qe", "output_qe_noisy"]

        total = self.dataframe[errors].mean()
        total["Layers"] = summary["Layers"].sum()
        total["Noisy_Layers"] = summary["Noisy_Layers"].sum()
        baseline = total["output_qe"]
        total["drop_pct"] = (
            100 * (baseline - total["output_qe_noisy"]) / baseline if baseline > 0 else 0.0
        )

        stats_df = pd.concat([summary, total.to_frame("all").T[summary.columns]])
        stats_df.index.name = "layer_type"
        stats_df[["Layers", "Noisy_Layers"]] = stats_df[["Layers", "Noisy_Layers"]].astype(int)
        return round(stats_df, precision)
