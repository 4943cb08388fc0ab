import numpy as np
import pytest

from doge.data import BOS_ID
from doge.errors import ConfigError
from doge.synthetic import FIRST_SYMBOL, DomainSpec, SyntheticSpec, domain_kernel, generate_synthetic, spec_from_dict


def _spec(**kw):
    base = dict(domains=[DomainSpec("a"), DomainSpec("b", like="a", overlap=0.5), DomainSpec("c")],
                seq_len=20, sequences_per_domain=30, seed=4)
    base.update(kw)
    return SyntheticSpec(**base)


def test_full_overlap_gives_identical_kernels():
    spec = _spec(domains=[DomainSpec("a"), DomainSpec("b", like="a", overlap=1.0)])
    assert np.array_equal(domain_kernel(spec, "a"), domain_kernel(spec, "b"))


def test_zero_overlap_gives_disjoint_supports():
    spec = _spec()
    corpus = generate_synthetic(spec)
    a, c = set(corpus.domains[0][:, 1:].ravel()), set(corpus.domains[2][:, 1:].ravel())
    assert not a & c
    Ka, Kc = domain_kernel(spec, "a"), domain_kernel(spec, "c")
    assert not np.any(Ka.sum(axis=(0, 1)) * Kc.sum(axis=(0, 1)))


def test_kernels_are_stochastic():
    K = domain_kernel(_spec(), "b")
    m = _spec().alphabet_size
    rows = K.sum(axis=2)
    reachable = rows > 0
    assert np.allclose(rows[reachable], 1.0, atol=1e-12)
    assert reachable.sum() >= (2 * m) ** 2 * 0.5


def test_overlap_matrix():
    m = _spec().overlap_matrix()
    assert m[0, 1] == pytest.approx(0.5) and m[1, 0] == pytest.approx(0.5)
    assert m[0, 2] == 0.0
    assert np.allclose(np.diag(m), 1.0)


def test_same_spec_same_corpus():
    a, b = generate_synthetic(_spec()), generate_synthetic(_spec())
    assert all(np.array_equal(x, y) for x, y in zip(a.domains, b.domains))
    c = generate_synthetic(_spec(), seed=5)
    assert not np.array_equal(a.domains[0], c.domains[0])


def test_rows_are_bos_prefixed_symbols():
    corpus = generate_synthetic(_spec())
    for d in corpus.domains:
        assert d.shape == (30, 20)
        assert np.all(d[:, 0] == BOS_ID)
        assert d[:, 1:].min() >= FIRST_SYMBOL and d[:, 1:].max() < 256


def test_ood_copy_of_a_domain_shares_its_law():
    spec = _spec(ood={"a": 1.0}, ood_sequences=40)
    corpus = generate_synthetic(spec)
    assert corpus.ood.shape == (40, 20)
    assert set(corpus.ood[:, 1:].ravel()) <= set(range(FIRST_SYMBOL, FIRST_SYMBOL + 8))
    assert not any(np.array_equal(corpus.ood[0], row) for row in corpus.domains[0])


def test_ood_mixture_draws_from_named_domains():
    corpus = generate_synthetic(_spec(ood={"a": 0.5, "c": 0.5}, ood_sequences=200))
    c_symbols = set(corpus.domains[2][:, 1:].ravel())
    from_c = np.array([row[1] in c_symbols for row in corpus.ood])
    assert 60 < from_c.sum() < 140


def test_explicit_components():
    spec = _spec(domains=[DomainSpec("a"), DomainSpec("b"), DomainSpec("ab", components={"a": 1, "b": 3})])
    assert spec.mixtures()["ab"] == {"a": 0.25, "b": 0.75}
    assert spec.overlap_matrix()[2, 1] == pytest.approx(0.75)


@pytest.mark.parametrize("bad", [
    dict(domains=[DomainSpec("a"), DomainSpec("a")]),
    dict(domains=[DomainSpec("a", like="b"), DomainSpec("b")]),
    dict(domains=[DomainSpec("a"), DomainSpec("b", like="a", overlap=1.5)]),
    dict(ood={"zzz": 1.0}),
    dict(alphabet_size=200),
])
def test_invalid_specs(bad):
    with pytest.raises(ConfigError):
        generate_synthetic(_spec(**bad))


def test_spec_from_dict():
    spec = spec_from_dict({"domains": ["x", {"name": "y", "like": "x", "overlap": 0.25}],
                           "ood": {"mix": {"x": 1.0}}, "seq_len": 12})
    assert [d.name for d in spec.domains] == ["x", "y"]
    assert spec.ood == {"x": 1.0}
    with pytest.raises(ConfigError, match=r"domains\[0\]"):
        spec_from_dict({"domains": [{"name": "x", "colour": 1}]})
