"""Statistical testing for recommendation and ranking results."""

import logging
from typing import Dict, List, Optional

import numpy as np
import pandas as pd
from scipy import stats

from ..config import get_config

logger = logging.getLogger(__name__)


class StatisticalTests:
    """Significance tests for paired method comparisons and ranks against chance."""

    def __init__(self, significance_levels: Optional[List[float]] = None):
        """
        Initialize statistical test framework.

        Args:
            significance_levels: Thresholds for the '***', '**', '*' labels
        """
        if significance_levels is None:
            significance_levels = get_config().eval_config().significance_levels
        self.significance_levels = sorted(significance_levels)

    def t_test(
        self,
        values: pd.Series,
        null_hypothesis: float = 0.0,
        alternative: str = 'two-sided'
    ) -> Dict:
        """
        One-sample t-test.

        H0: mean = null_hypothesis

        Args:
            values: Observations
            null_hypothesis: Null mean
            alternative: 'two-sided', 'greater' or 'less'

        Returns:
            Dictionary with test results
        """
        x = pd.Series(values, dtype=float).dropna()
        if len(x) < 2 or x.std() == 0:
            return {'test': 't-test', 'valid': False, 'reason': 'Insufficient variance or observations'}

        result = stats.ttest_1samp(x, null_hypothesis, alternative=alternative)
        return {
            'test': 't-test',
            'valid': True,
            'mean': float(x.mean()),
            'std': float(x.std()),
            'n': len(x),
            't_statistic': float(result.statistic),
            'degrees_of_freedom': len(x) - 1,
            'p_value': float(result.pvalue),
            'alternative': alternative,
            'significant': result.pvalue < 0.05,
            'significance_level': self._get_significance_level(result.pvalue),
        }

    def sign_test(self, differences: pd.Series, alternative: str = 'greater') -> Dict:
        """
        Sign test on paired differences; zero differences are discarded.

        H0: P(difference > 0) = 0.5

        Args:
            differences: Paired differences (method - baseline)
            alternative: 'greater' tests that positive differences dominate

        Returns:
            Dictionary with test results
        """
        d = pd.Series(differences, dtype=float).dropna()
        n_positive = int((d > 0).sum())
        n_negative = int((d < 0).sum())
        n_total = n_positive + n_negative
        if n_total == 0:
            return {'test': 'sign-test', 'valid': False, 'reason': 'All differences are zero'}

        p_value = stats.binomtest(n_positive, n_total, 0.5, alternative=alternative).pvalue
        return {
            'test': 'sign-test',
            'valid': True,
            'n_positive': n_positive,
            'n_negative': n_negative,
            'n_ties': int(len(d) - n_total),
            'n': n_total,
            'p_value': float(p_value),
            'alternative': alternative,
            'significant': p_value < 0.05,
            'significance_level': self._get_significance_level(p_value),
        }

    def wilcoxon_signed_rank_test(
        self,
        values: pd.Series,
        null_hypothesis: float = 0.0,
        alternative: str = 'two-sided'
    ) -> Dict:
        """
        Wilcoxon signed-rank test of values - null_hypothesis.

        Args:
            values: Observations (or paired differences)
            null_hypothesis: Null median
            alternative: 'two-sided', 'greater' or 'less'

        Returns:
            Dictionary with test results
        """
        x = pd.Series(values, dtype=float).dropna() - null_hypothesis
        if len(x) < 3 or (x == 0).all():
            return {'test': 'wilcoxon', 'valid': False, 'reason': 'Insufficient observations (need at least 3)'}

        try:
            statistic, p_value = stats.wilcoxon(x, alternative=alternative)
        except ValueError as e:
            return {'test': 'wilcoxon', 'valid': False, 'reason': str(e)}

        return {
            'test': 'wilcoxon',
            'valid': True,
            'statistic': float(statistic),
            'p_value': float(p_value),
            'median': float(x.median() + null_hypothesis),
            'n': len(x),
            'alternative': alternative,
            'significant': p_value < 0.05,
            'significance_level': self._get_significance_level(p_value),
        }

    def paired_comparison(self, method: pd.Series, baseline: pd.Series) -> Dict[str, Dict]:
        """
        One-sided tests that a method beats a baseline on paired per-query scores.

        Args:
            method: Per-query scores of the method
            baseline: Per-query scores of the baseline, aligned with ``method``

        Returns:
            Dictionary with sign test and Wilcoxon results
        """
        diff = pd.Series(method, dtype=float).reset_index(drop=True) - \
            pd.Series(baseline, dtype=float).reset_index(drop=True)
        return {
            'sign_test': self.sign_test(diff, alternative='greater'),
            'wilcoxon_test': self.wilcoxon_signed_rank_test(diff, alternative='greater'),
        }

    def rank_vs_chance(self, normalized_ranks: pd.Series) -> Dict[str, Dict]:
        """
        One-sided tests that normalised ranks in [0, 1] sit below chance (0.5).

        Args:
            normalized_ranks: (rank - 1) / (candidates - 1) per target

        Returns:
            Dictionary with t-test and Wilcoxon results
        """
        ranks = pd.Series(normalized_ranks, dtype=float)
        return {
            't_test': self.t_test(ranks, 0.5, alternative='less'),
            'wilcoxon_test': self.wilcoxon_signed_rank_test(ranks, 0.5, alternative='less'),
        }

    def _get_significance_level(self, p_value: float) -> str:
        """
        Get significance level label based on p-value.

        Args:
            p_value: P-value from statistical test

        Returns:
            Significance level string (e.g., '***', '**', '*', 'ns')
        """
        labels = ['***', '**', '*']
        for level, label in zip(self.significance_levels, labels):
            if p_value < level:
                return label
        return 'ns'

    def create_summary_table(self, test_results: Dict[str, Dict]) -> pd.DataFrame:
        """
        Create summary table of statistical test results.

        Args:
            test_results: Mapping of comparison name to {test name: result}

        Returns:
            DataFrame with one row per valid test
        """
        rows = []
        for comparison, tests in test_results.items():
            for test_name, result in tests.items():
                if not result.get('valid', False):
                    continue
                rows.append({
                    'comparison': comparison,
                    'test': test_name,
                    'statistic': result.get('t_statistic', result.get('statistic', np.nan)),
                    'p_value': result.get('p_value', np.nan),
                    'significance': result.get('significance_level', 'ns'),
                    'n': result.get('n', np.nan),
                })
        return pd.DataFrame(rows, columns=['comparison', 'test', 'statistic', 'p_value', 'significance', 'n'])
