"""Figures for training runs and evaluation reports."""

import logging
from typing import Optional

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd
import seaborn as sns

from ..config import TASKS, get_config

logger = logging.getLogger(__name__)


class ResultsVisualizer:
    """Creates figures for training curves and evaluation results."""

    def __init__(self):
        """Initialize visualizer."""
        self.config = get_config()

        plt.style.use(self.config.get('visualization.style', 'seaborn-v0_8-darkgrid'))
        self.figsize = tuple(self.config.get('visualization.figure_size', [12, 8]))
        self.dpi = self.config.get('visualization.dpi', 150)

        self.colors = sns.color_palette("Set2")

    def plot_training_curves(self, history: pd.DataFrame) -> plt.Figure:
        """
        Plot per-task objective estimates and the regularizer over epochs.

        Args:
            history: TrainReport.to_frame() output

        Returns:
            Matplotlib figure
        """
        fig, axes = plt.subplots(1, 2, figsize=self.figsize)

        if history.empty:
            logger.warning("No epochs to plot")
            return fig

        tasks = [t for t in TASKS if t in history.columns and history[t].notna().any()]
        for color, task in zip(self.colors, tasks):
            axes[0].plot(history['epoch'], history[task], label=task, color=color, linewidth=2)
        axes[0].set_xlabel('Epoch')
        axes[0].set_ylabel('Mean negative-sampling objective')
        axes[0].set_title('Objective per task')
        axes[0].legend()

        axes[1].plot(history['epoch'], history['regularizer'], color=self.colors[-1], linewidth=2)
        axes[1].set_xlabel('Epoch')
        axes[1].set_ylabel('Hinge-norm penalty')
        axes[1].set_title('Regularizer')

        plt.tight_layout()
        return fig

    def plot_rank_distribution(
        self,
        normalized_ranks: np.ndarray,
        cold_start_ranks: Optional[np.ndarray] = None
    ) -> plt.Figure:
        """
        Histogram of normalised held-out ranks (0 = best, 0.5 = chance).

        Args:
            normalized_ranks: Ranks of held-out patient-medicine edges
            cold_start_ranks: Ranks of cold-start medicine edges, if any

        Returns:
            Matplotlib figure
        """
        fig, ax = plt.subplots(figsize=self.figsize)

        frames = [pd.DataFrame({'normalized_rank': normalized_ranks, 'edges': 'held-out'})]
        if cold_start_ranks is not None and len(cold_start_ranks):
            frames.append(pd.DataFrame({'normalized_rank': cold_start_ranks, 'edges': 'cold-start'}))
        data = pd.concat(frames, ignore_index=True)

        if data.empty:
            logger.warning("No ranks to plot")
            return fig

        sns.histplot(data=data, x='normalized_rank', hue='edges', bins=20, binrange=(0, 1),
                     stat='density', common_norm=False, palette=self.colors[:data['edges'].nunique()], ax=ax)
        ax.axvline(x=0.5, color='red', linestyle='--', linewidth=2, label='Chance')
        ax.set_xlabel('Normalised rank')
        ax.set_title('Rank of held-out medicines among all medicines')

        plt.tight_layout()
        return fig

    def plot_method_comparison(self, methods: pd.DataFrame) -> plt.Figure:
        """
        Bar charts of mean Jaccard and DDI rate per method.

        Args:
            methods: EvalReport.methods

        Returns:
            Matplotlib figure
        """
        fig, axes = plt.subplots(1, 2, figsize=self.figsize)

        if methods.empty:
            return fig

        sns.barplot(data=methods, x='method', y='mean_jaccard', hue='method', palette=self.colors[:len(methods)],
                    legend=False, ax=axes[0])
        axes[0].set_ylabel('Mean Jaccard')
        axes[0].set_title('Accuracy')

        sns.barplot(data=methods, x='method', y='ddi_rate', hue='method', palette=self.colors[:len(methods)],
                    legend=False, ax=axes[1])
        axes[1].set_ylabel('Sets with an interacting pair')
        axes[1].set_title('DDI rate')

        for ax in axes:
            ax.set_xlabel('')
            ax.tick_params(axis='x', rotation=45)

        plt.tight_layout()
        return fig

    def close(self, fig: plt.Figure):
        plt.close(fig)
