import pytest

from rho_vae import checks, posterior


@pytest.fixture(scope="module")
def pristine_results():
    return checks.run_checks(mc_draws=20_000, seed=0)


def test_every_check_passes_on_the_pristine_build(pristine_results):
    failures = [(result.name, result.max_error) for result in pristine_results if not result.passed]
    assert failures == []
    assert len(pristine_results) == 15


def test_report_is_repeatable(pristine_results):
    assert checks.run_checks(mc_draws=20_000, seed=0) == pristine_results


def test_corrupted_kl_is_reported_by_name(monkeypatch):
    genuine = posterior.kl_ar1
    monkeypatch.setattr(posterior, "kl_ar1", lambda p: genuine(p) + 0.25)
    failed = [result.name for result in checks.run_checks(mc_draws=20_000, seed=0) if not result.passed]
    assert failed
    assert all("kl_ar1" in name for name in failed)


def test_format_table_lists_every_check(pristine_results):
    table = checks.format_table(pristine_results)
    for result in pristine_results:
        assert result.name in table
    assert "FAIL" not in table
    assert checks.summarize(pristine_results) == (len(pristine_results), [])
