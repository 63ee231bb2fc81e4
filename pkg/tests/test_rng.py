import numpy as np

from spotlighter.rng import Stream


def test_identical_seeds_identical_streams():
    a = Stream(42).normals(100)
    b = Stream(42).normals(100)
    assert np.array_equal(a, b)


def test_different_seeds_differ():
    assert not np.array_equal(Stream(1).normals(50), Stream(2).normals(50))


def test_children_are_independent_of_draw_order():
    parent = Stream(7)
    c3 = parent.child(3)
    parent.uniforms(1000)  # consuming the parent must not move children
    c3_again = Stream(7).child(3)
    assert np.array_equal(c3.normals(20), c3_again.normals(20))


def test_child_tags_distinct():
    s = Stream(9)
    assert not np.array_equal(s.child(0).uniforms(32), s.child(1).uniforms(32))


def test_uniforms_in_unit_interval():
    u = Stream(5).uniforms(10000)
    assert u.min() >= 0.0 and u.max() < 1.0
    assert abs(u.mean() - 0.5) < 0.02


def test_normals_moments():
    z = Stream(13).normals(20000)
    assert abs(z.mean()) < 0.03
    assert abs(z.std() - 1.0) < 0.03


def test_normals_shape():
    assert Stream(1).normals(3, 4, 5).shape == (3, 4, 5)


def test_sequential_draws_continue_the_stream():
    s = Stream(21)
    first = s.uniforms(10)
    second = s.uniforms(10)
    combined = Stream(21).uniforms(20)
    assert np.array_equal(np.concatenate([first, second]), combined)


def test_integers_in_range():
    v = Stream(3).integers(5000, 7)
    assert v.min() >= 0 and v.max() < 7
    assert len(np.unique(v)) == 7


def test_permutation_is_permutation():
    p = Stream(4).permutation(100)
    assert np.array_equal(np.sort(p), np.arange(100))
