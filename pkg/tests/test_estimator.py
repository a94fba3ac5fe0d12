import numpy as np
import pytest
from sklearn.base import clone

from beltfield.estimator import SpatioTemporalBetaRegressor, panel_from_long
from beltfield.graph import GraphError
from beltfield.panel import PanelError

KW = dict(n_iter=400, n_burnin=200, n_thin=2, n_chains=2, random_state=2)


def test_params_and_clone(grid3):
    est = SpatioTemporalBetaRegressor(graph=grid3, **KW)
    c = clone(est)
    assert c.get_params()["n_iter"] == 400 and c.graph.equals(grid3)
    est.set_params(spec="S_BYM.T_RW1.ST_1.B")
    assert est.spec == "S_BYM.T_RW1.ST_1.B"


def test_fit_panel_predict_score(small_panel, grid3):
    est = SpatioTemporalBetaRegressor("S_BYM.T_AR1.ST_1.B", graph=grid3, **KW).fit(small_panel)
    pred = est.predict()
    assert pred.shape == (9, 6) and np.all((pred > 0) & (pred < 1))
    assert est.score(small_panel) > 0.5
    assert est.summary().iloc[0]["Parameter"] == "(Intercept)"


def test_fit_long_arrays_without_graph():
    rng = np.random.default_rng(0)
    i, t = np.repeat(np.arange(5), 4), np.tile(np.arange(4), 5)
    X = rng.normal(size=(20, 1))
    y = 1 / (1 + np.exp(-(0.5 * X[:, 0] + rng.normal(scale=0.1, size=20))))
    est = SpatioTemporalBetaRegressor("S_0.T_0.ST_0.B", **KW)
    est.fit(X, y, region_index=i, month_index=t)
    pred = est.predict(X, region_index=i, month_index=t)
    assert pred.shape == (20,)
    assert np.corrcoef(pred, y)[0, 1] > 0.8
    with pytest.raises(ValueError):
        est.predict(np.zeros((3, 2)), region_index=[0, 1, 2], month_index=[0, 0, 0])


def test_input_validation(small_panel, grid3):
    with pytest.raises(ValueError, match="graph"):
        SpatioTemporalBetaRegressor("S_BYM.T_0.ST_0.B", **KW).fit(small_panel)
    with pytest.raises(ValueError):
        SpatioTemporalBetaRegressor(**KW).fit(np.zeros((2, 1)))
    wrong = grid3.permute(np.arange(9)[::-1])
    with pytest.raises(GraphError):
        SpatioTemporalBetaRegressor(graph=wrong, **KW).fit(small_panel)
    with pytest.raises(ValueError, match="duplicate"):
        panel_from_long(np.zeros((2, 1)), [0.5, 0.5], [0, 0], [1, 1])
    with pytest.raises(PanelError):
        panel_from_long(np.zeros((1, 1)), [1.0], [0], [0])
