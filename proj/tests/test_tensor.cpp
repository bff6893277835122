#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

#include "gals/gradcheck.hpp"
#include "gals/rng.hpp"
#include "gals/tensor.hpp"

using namespace gals;

namespace {

Tensor rand_tensor(Shape s, uint64_t seed, double lo = -1.0, double hi = 1.0) {
    Rng rng(seed);
    std::vector<double> v(static_cast<size_t>(numel_of(s)));
    for (auto& x : v) x = rng.uniform(lo, hi);
    return Tensor(std::move(s), std::move(v));
}

// reduce to a scalar through fixed random weights so every output element
// contributes to the checked gradient
Tensor weighted(const Tensor& t, uint64_t seed) {
    Rng rng(seed);
    std::vector<double> w(static_cast<size_t>(t.numel()));
    for (auto& x : w) x = rng.uniform(-1.0, 1.0);
    return sum_all(mul(t, Tensor(t.shape(), std::move(w))));
}

}  // namespace

TEST_CASE("rng reproduces the reference splitmix64 stream") {
    Rng a(0);
    CHECK(a.next_u64() == 0xe220a8397b1dcdafull);
    CHECK(a.next_u64() == 0x6e789e6aa1b965f4ull);
    Rng b(42);
    CHECK(b.next_u64() == 0xbdd732262feb6e95ull);
    CHECK(b.next_u64() == 0x28efe333b266f103ull);
    CHECK(b.next_u64() == 0x47526757130f9f52ull);
}

TEST_CASE("rng uniform and normal match the reference algorithm") {
    Rng r(42);
    CHECK(r.uniform() == doctest::Approx(0.7415648787718233).epsilon(1e-15));
    CHECK(r.uniform() == doctest::Approx(0.1599103928769201).epsilon(1e-15));
    CHECK(r.uniform() == doctest::Approx(0.27860113025513866).epsilon(1e-15));
    Rng n(42);
    CHECK(n.normal() == doctest::Approx(0.8822489062222688).epsilon(1e-12));
    CHECK(n.normal() == doctest::Approx(1.388473285287707).epsilon(1e-12));
    CHECK(n.normal() == doctest::Approx(-0.4508498757188601).epsilon(1e-12));
    CHECK(n.normal() == doctest::Approx(0.6707164409024291).epsilon(1e-12));
}

TEST_CASE("rng hashing and seed derivation are stable") {
    CHECK(hash64("") == 0xcbf29ce484222325ull);
    CHECK(hash64("abc") == 0xe71fa2190541574bull);
    CHECK(hash64("grounder") == 0x7fc680f7a4e741c9ull);
    CHECK(derive_seed("data", 7, 3) == 0xe69f31559516cd2bull);
    CHECK(derive_seed("data", 7, 0) == 0x31e18514c97f215dull);
    CHECK(derive_seed("data", 7) == derive_seed("data", 7, 0));
    CHECK(derive_seed("data", 7) != derive_seed("train", 7));
    CHECK(derive_seed("data", 7) != derive_seed("data", 8));
}

TEST_CASE("rng shuffle permutes and state round-trips") {
    Rng r(9);
    std::vector<int> v{0, 1, 2, 3, 4, 5, 6, 7};
    r.shuffle(v);
    std::vector<int> sorted = v;
    std::sort(sorted.begin(), sorted.end());
    CHECK(sorted == std::vector<int>{0, 1, 2, 3, 4, 5, 6, 7});

    const uint64_t st = r.state();
    const uint64_t x1 = r.next_u64(), x2 = r.next_u64();
    r.set_state(st);
    CHECK(r.next_u64() == x1);
    CHECK(r.next_u64() == x2);

    Rng r2(9);
    std::vector<int> w{0, 1, 2, 3, 4, 5, 6, 7};
    r2.shuffle(w);
    CHECK(v == w);
}

TEST_CASE("uniform_int stays in range and covers values") {
    Rng r(5);
    std::vector<int> seen(7, 0);
    for (int i = 0; i < 2000; ++i) {
        int v = r.uniform_int(7);
        REQUIRE(v >= 0);
        REQUIRE(v < 7);
        ++seen[static_cast<size_t>(v)];
    }
    for (int c : seen) CHECK(c > 0);
}

TEST_CASE("tensor container round-trips through the binary format") {
    Tensor t = rand_tensor({2, 3, 2}, 77);
    std::ostringstream os(std::ios::binary);
    write_tensor(os, t);
    const std::string bytes = os.str();
    CHECK(bytes.substr(0, 8) == "GALSTEN1");
    CHECK(bytes.size() == 8 + 4 + 3 * 8 + 12 * 8);

    std::istringstream is(bytes, std::ios::binary);
    Tensor u = read_tensor(is);
    REQUIRE(u.shape() == t.shape());
    CHECK(std::memcmp(u.data(), t.data(), sizeof(double) * 12) == 0);

    Tensor s = Tensor::scalar(3.5);
    std::ostringstream os2(std::ios::binary);
    write_tensor(os2, s);
    std::istringstream is2(os2.str(), std::ios::binary);
    Tensor s2 = read_tensor(is2);
    CHECK(s2.rank() == 0);
    CHECK(s2.item() == 3.5);

    std::string bad = bytes;
    bad[0] = 'X';
    std::istringstream isb(bad, std::ios::binary);
    CHECK_THROWS_AS(read_tensor(isb), std::runtime_error);

    std::istringstream ist(bytes.substr(0, bytes.size() - 4), std::ios::binary);
    CHECK_THROWS_AS(read_tensor(ist), std::runtime_error);
}

TEST_CASE("conv2d matches hand-worked values") {
    Tensor x({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
    Tensor ones = Tensor::full({1, 1, 3, 3}, 1.0);
    Tensor y = conv2d(x, ones);
    const std::vector<double> want{12, 21, 16, 27, 45, 33, 24, 39, 28};
    REQUIRE(y.shape() == Shape{1, 1, 3, 3});
    for (int i = 0; i < 9; ++i) CHECK(y.data()[i] == want[static_cast<size_t>(i)]);

    Tensor delta({1, 1, 3, 3}, {0, 0, 0, 0, 1, 0, 0, 0, 0});
    Tensor id = conv2d(x, delta);
    for (int i = 0; i < 9; ++i) CHECK(id.data()[i] == x.data()[i]);

    // tap one to the right: output column j reads input column j+1
    Tensor shift({1, 1, 3, 3}, {0, 0, 0, 0, 0, 1, 0, 0, 0});
    Tensor sh = conv2d(x, shift);
    const std::vector<double> want_sh{2, 3, 0, 5, 6, 0, 8, 9, 0};
    for (int i = 0; i < 9; ++i) CHECK(sh.data()[i] == want_sh[static_cast<size_t>(i)]);
}

TEST_CASE("bilinear upsample uses half-pixel centers") {
    Tensor x({1, 1, 2, 2}, {1, 2, 3, 4});
    Tensor y = bilinear_upsample(x, 2);
    const std::vector<double> want{1,   1.25, 1.75, 2,   1.5, 1.75, 2.25, 2.5,
                                   2.5, 2.75, 3.25, 3.5, 3,   3.25, 3.75, 4};
    REQUIRE(y.shape() == Shape{1, 1, 4, 4});
    for (int i = 0; i < 16; ++i)
        CHECK(y.data()[i] == doctest::Approx(want[static_cast<size_t>(i)]).epsilon(1e-15));

    Tensor z = bilinear_upsample(x, 1);
    for (int i = 0; i < 4; ++i) CHECK(z.data()[i] == x.data()[i]);

    auto grid = bilinear_resize_grid({1, 2, 3, 4}, 2, 2, 4, 4);
    for (int i = 0; i < 16; ++i)
        CHECK(grid[static_cast<size_t>(i)] ==
              doctest::Approx(want[static_cast<size_t>(i)]).epsilon(1e-15));

    auto down = area_downsample_grid(grid, 4, 4, 2, 2);
    CHECK(down[0] == doctest::Approx(1.375));
    auto flat = area_downsample_grid(std::vector<double>(36, 0.25), 6, 6, 3, 3);
    for (double v : flat) CHECK(v == 0.25);
}

TEST_CASE("matmul and transpose match hand-worked values") {
    Tensor a({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor b({3, 2}, {7, 8, 9, 10, 11, 12});
    Tensor c = matmul(a, b);
    CHECK(c.data()[0] == 58);
    CHECK(c.data()[1] == 64);
    CHECK(c.data()[2] == 139);
    CHECK(c.data()[3] == 154);
    Tensor at = transpose(a);
    REQUIRE(at.shape() == Shape{3, 2});
    CHECK(at.data()[1] == 4);
    CHECK(at.data()[2] == 2);
}

TEST_CASE("maxpool ties resolve to the first element in row-major order") {
    Tensor x({1, 1, 2, 2}, {7, 7, 7, 7});
    Tape tape;
    Tensor xt = tape.watch(x);
    Tensor y = maxpool2(xt);
    CHECK(y.item() == 7);
    Tensor g = backward(sum_all(y), {xt}, false)[0];
    CHECK(g.data()[0] == 1);
    CHECK(g.data()[1] == 0);
    CHECK(g.data()[2] == 0);
    CHECK(g.data()[3] == 0);

    Tensor x2({1, 1, 2, 4}, {1, 3, 2, 0, 3, 2, 5, 5});
    Tensor y2 = maxpool2(x2);
    CHECK(y2.data()[0] == 3);
    CHECK(y2.data()[1] == 5);
}

TEST_CASE("softmax rows normalize and shifting logits changes nothing") {
    // dyadic logits keep the +8 shift exact, so the comparison can be bitwise
    Tensor z({2, 4}, {0.25, -1.5, 2.0, 0.75, 5.0, 5.0, 5.0, 5.0});
    Tensor p = softmax(z);
    for (int r = 0; r < 2; ++r) {
        double s = 0.0;
        for (int c = 0; c < 4; ++c) s += p.data()[r * 4 + c];
        CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
    for (int c = 0; c < 4; ++c) CHECK(p.data()[4 + c] == 0.25);

    Tensor lp = log_softmax(z);
    for (int c = 0; c < 4; ++c)
        CHECK(lp.data()[4 + c] == doctest::Approx(-std::log(4.0)).epsilon(1e-15));

    std::vector<double> shifted(z.values());
    for (auto& v : shifted) v += 8.0;
    Tensor p2 = softmax(Tensor({2, 4}, shifted));
    for (int i = 0; i < 8; ++i) CHECK(p.data()[i] == p2.data()[i]);
}

TEST_CASE("global average pool reduces each plane") {
    Tensor x({1, 2, 2, 2}, {1, 2, 3, 4, 10, 20, 30, 40});
    Tensor y = global_avg_pool(x);
    REQUIRE(y.shape() == Shape{1, 2});
    CHECK(y.data()[0] == 2.5);
    CHECK(y.data()[1] == 25.0);
}

TEST_CASE("first-order gradients agree with finite differences") {
    int fixtures = 0;
    auto fd = [&](std::function<Tensor(Tape&, const std::vector<Tensor>&)> f,
                  std::vector<Tensor> pts) {
        auto r = finite_difference_check(f, pts);
        CHECK(r.checked > 0);
        CHECK(r.max_rel_err < 1e-4);
        ++fixtures;
    };

    fd([](Tape&, const std::vector<Tensor>& v) { return weighted(add(v[0], v[1]), 11); },
       {rand_tensor({2, 3}, 1), rand_tensor({2, 3}, 2)});
    fd([](Tape&, const std::vector<Tensor>& v) { return weighted(sub(v[0], v[1]), 12); },
       {rand_tensor({2, 3}, 3), rand_tensor({2, 3}, 4)});
    fd([](Tape&, const std::vector<Tensor>& v) { return weighted(neg(v[0]), 13); },
       {rand_tensor({5}, 5)});
    fd([](Tape&, const std::vector<Tensor>& v) { return weighted(mul(v[0], v[1]), 14); },
       {rand_tensor({2, 3}, 6), rand_tensor({2, 3}, 7)});
    fd([](Tape&, const std::vector<Tensor>& v) { return weighted(scale(v[0], -2.5), 15); },
       {rand_tensor({4}, 8)});
    fd([](Tape&, const std::vector<Tensor>& v) { return weighted(abs(v[0]), 16); },
       {rand_tensor({3, 3}, 9)});
    fd([](Tape&, const std::vector<Tensor>& v) { return weighted(relu(v[0]), 17); },
       {rand_tensor({3, 3}, 10)});
    fd([](Tape&, const std::vector<Tensor>& v) { return weighted(exp(v[0]), 18); },
       {rand_tensor({2, 3}, 11)});
    fd([](Tape&, const std::vector<Tensor>& v) { return weighted(log(v[0]), 19); },
       {rand_tensor({2, 3}, 12, 0.5, 2.0)});
    fd([](Tape&, const std::vector<Tensor>& v) { return weighted(sqrt(v[0]), 20); },
       {rand_tensor({2, 3}, 13, 0.5, 2.0)});
    fd([](Tape&, const std::vector<Tensor>& v) { return weighted(reciprocal(v[0]), 21); },
       {rand_tensor({2, 3}, 14, 0.5, 2.0)});
    fd([](Tape&, const std::vector<Tensor>& v) { return weighted(reciprocal(v[0]), 22); },
       {rand_tensor({2, 3}, 15, -2.0, -0.5)});
    fd([](Tape&, const std::vector<Tensor>& v) { return weighted(matmul(v[0], v[1]), 23); },
       {rand_tensor({3, 4}, 16), rand_tensor({4, 2}, 17)});
    fd([](Tape&, const std::vector<Tensor>& v) { return weighted(transpose(v[0]), 24); },
       {rand_tensor({3, 4}, 18)});
    fd([](Tape&, const std::vector<Tensor>& v) { return weighted(conv2d(v[0], v[1]), 25); },
       {rand_tensor({2, 2, 4, 4}, 19), rand_tensor({3, 2, 3, 3}, 20)});
    fd([](Tape&, const std::vector<Tensor>& v) { return weighted(conv2d(v[0], v[1]), 26); },
       {rand_tensor({1, 3, 3, 3}, 21), rand_tensor({2, 3, 1, 1}, 22)});
    fd([](Tape&, const std::vector<Tensor>& v) { return weighted(kernel_flip(v[0]), 27); },
       {rand_tensor({2, 3, 3, 3}, 23)});
    fd([](Tape&, const std::vector<Tensor>& v) {
           return weighted(conv2d_weight_grad(v[0], v[1], 3, 3), 28);
       },
       {rand_tensor({1, 2, 4, 4}, 24), rand_tensor({1, 3, 4, 4}, 25)});
    fd([](Tape&, const std::vector<Tensor>& v) { return weighted(maxpool2(v[0]), 29); },
       {rand_tensor({1, 2, 4, 4}, 26)});
    fd([](Tape&, const std::vector<Tensor>& v) { return weighted(sum_axis(v[0], 0), 30); },
       {rand_tensor({3, 4}, 27)});
    fd([](Tape&, const std::vector<Tensor>& v) { return weighted(sum_axis(v[0], 1), 31); },
       {rand_tensor({3, 4}, 28)});
    fd([](Tape&, const std::vector<Tensor>& v) { return weighted(sum_axis(v[0], 2), 32); },
       {rand_tensor({2, 3, 4}, 29)});
    fd([](Tape&, const std::vector<Tensor>& v) {
           return weighted(broadcast_axis(v[0], 1, 4), 33);
       },
       {rand_tensor({3, 1}, 30)});
    fd([](Tape&, const std::vector<Tensor>& v) {
           return weighted(broadcast_axis(v[0], 0, 3), 34);
       },
       {rand_tensor({1, 4}, 31)});
    fd([](Tape&, const std::vector<Tensor>& v) { return scale(sum_all(v[0]), 1.7); },
       {rand_tensor({3, 2, 2}, 32)});
    fd([](Tape&, const std::vector<Tensor>& v) {
           return weighted(broadcast_full(v[0], {2, 3}), 35);
       },
       {rand_tensor({}, 33)});
    fd([](Tape&, const std::vector<Tensor>& v) {
           return weighted(bilinear_upsample(v[0], 2), 36);
       },
       {rand_tensor({1, 2, 3, 3}, 34)});
    fd([](Tape&, const std::vector<Tensor>& v) {
           return weighted(bilinear_upsample(v[0], 3), 37);
       },
       {rand_tensor({1, 1, 2, 2}, 35)});
    fd([](Tape&, const std::vector<Tensor>& v) { return weighted(reshape(v[0], {3, 4}), 38); },
       {rand_tensor({2, 6}, 36)});
    fd([](Tape&, const std::vector<Tensor>& v) { return weighted(softmax(v[0]), 39); },
       {rand_tensor({3, 4}, 37)});
    fd([](Tape&, const std::vector<Tensor>& v) { return weighted(log_softmax(v[0]), 40); },
       {rand_tensor({3, 4}, 38)});
    fd([](Tape&, const std::vector<Tensor>& v) { return weighted(global_avg_pool(v[0]), 41); },
       {rand_tensor({2, 3, 4, 4}, 39)});
    fd([](Tape&, const std::vector<Tensor>& v) { return scale(mean_all(v[0]), 2.0); },
       {rand_tensor({3, 3}, 40)});
    fd([](Tape&, const std::vector<Tensor>& v) {
           Tensor h = global_avg_pool(relu(conv2d(v[0], v[1])));
           return weighted(softmax(matmul(h, v[2])), 42);
       },
       {rand_tensor({2, 2, 4, 4}, 41), rand_tensor({3, 2, 3, 3}, 42),
        rand_tensor({3, 2}, 43)});

    CHECK(fixtures >= 20);
}

TEST_CASE("input gradients of a quadratic form match the closed form") {
    // y = (w.x)^2 with w=[1,2], x=[1,1]: dy/dx = 2(w.x)w = [6,12];
    // F = |dy/dx|^2 gives dF/dw = 8sx|w|^2 + 8s^2 w = [192, 264]
    Tape tape;
    Tensor w = tape.watch(Tensor({2}, {1, 2}));
    Tensor x = tape.watch(Tensor({2}, {1, 1}));
    Tensor s = sum_all(mul(w, x));
    Tensor y = mul(s, s);
    Tensor g = input_gradient(y, x);
    REQUIRE(g.shape() == Shape{2});
    CHECK(g.data()[0] == doctest::Approx(6.0).epsilon(1e-12));
    CHECK(g.data()[1] == doctest::Approx(12.0).epsilon(1e-12));
    CHECK(g.on_tape());

    Tensor F = sum_all(mul(g, g));
    CHECK(F.item() == doctest::Approx(180.0).epsilon(1e-12));
    Tensor dFdw = backward(F, {w}, false)[0];
    CHECK(dFdw.data()[0] == doctest::Approx(192.0).epsilon(1e-12));
    CHECK(dFdw.data()[1] == doctest::Approx(264.0).epsilon(1e-12));
}

TEST_CASE("second-order gradients agree with finite differences") {
    int fixtures = 0;
    auto fd2 = [&](std::function<Tensor(Tape&, const std::vector<Tensor>&)> f,
                   std::vector<Tensor> pts) {
        auto r = finite_difference_check(f, pts);
        CHECK(r.checked > 0);
        CHECK(r.max_rel_err < 1e-3);
        ++fixtures;
    };

    // grad-of-grad through a smooth conv stack
    fd2([](Tape&, const std::vector<Tensor>& v) {
            Tensor s = weighted(exp(scale(conv2d(v[0], v[1]), 0.1)), 21);
            Tensor g = input_gradient(s, v[0]);
            return sum_all(mul(g, g));
        },
        {rand_tensor({1, 2, 4, 4}, 50), rand_tensor({2, 2, 3, 3}, 51)});

    // grad-of-grad through log-softmax of a linear map
    fd2([](Tape&, const std::vector<Tensor>& v) {
            Tensor s = weighted(log_softmax(matmul(v[0], v[1])), 31);
            Tensor g = input_gradient(s, v[0]);
            return sum_all(mul(g, g));
        },
        {rand_tensor({2, 3}, 52), rand_tensor({3, 4}, 53)});

    // masked absolute penalty on the input gradient (the kink detector
    // drops coordinates where g crosses zero)
    fd2([](Tape&, const std::vector<Tensor>& v) {
            Tensor s = weighted(softmax(matmul(v[0], v[1])), 32);
            Tensor g = input_gradient(s, v[0]);
            Tensor mask = rand_tensor({2, 3}, 54, 0.0, 1.0);
            return sum_all(mul(mask, abs(g)));
        },
        {rand_tensor({2, 3}, 55), rand_tensor({3, 4}, 56)});

    // pooling inside the graph exercises the scatter op's own gradient
    fd2([](Tape&, const std::vector<Tensor>& v) {
            Tensor h = global_avg_pool(maxpool2(conv2d(v[0], v[1])));
            Tensor s = weighted(exp(scale(h, 0.3)), 41);
            Tensor g = input_gradient(s, v[0]);
            return sum_all(mul(g, g));
        },
        {rand_tensor({1, 2, 4, 4}, 57), rand_tensor({2, 2, 3, 3}, 58)});

    // upsampling inside the graph exercises its transpose's own gradient
    fd2([](Tape&, const std::vector<Tensor>& v) {
            Tensor s = weighted(bilinear_upsample(mul(v[0], v[0]), 2), 51);
            Tensor g = input_gradient(s, v[0]);
            return sum_all(mul(g, g));
        },
        {rand_tensor({1, 1, 3, 3}, 59)});

    // second derivatives of elementwise transcendentals
    fd2([](Tape&, const std::vector<Tensor>& v) {
            Tensor s = weighted(log(add(exp(v[0]), sqrt(v[0]))), 61);
            Tensor g = input_gradient(s, v[0]);
            return sum_all(mul(g, g));
        },
        {rand_tensor({2, 3}, 60, 0.5, 2.0)});

    CHECK(fixtures >= 6);
}

TEST_CASE("gradients accumulate linearly across shared subexpressions") {
    Tape tape;
    Tensor x = tape.watch(Tensor({3}, {0.5, -1.5, 2.0}));
    Tensor y = add(scale(sum_all(mul(x, x)), 2.0), scale(sum_all(x), 3.0));
    Tensor g = backward(y, {x}, false)[0];
    // d/dx (2|x|^2 + 3 sum x) = 4x + 3
    CHECK(g.data()[0] == 5.0);
    CHECK(g.data()[1] == -3.0);
    CHECK(g.data()[2] == 11.0);
}

TEST_CASE("tape replay reproduces every recorded value") {
    Tape tape;
    Tensor x = tape.watch(rand_tensor({2, 2, 4, 4}, 70));
    Tensor w = tape.watch(rand_tensor({3, 2, 3, 3}, 71));
    Tensor m = tape.watch(rand_tensor({3, 4}, 72));
    Tensor h = global_avg_pool(relu(conv2d(x, w)));
    Tensor loss = neg(mean_all(log_softmax(matmul(h, m))));
    backward(loss, {w, m}, true);
    CHECK(tape.size() > 20);
    CHECK(tape.replay_max_abs_diff() == 0.0);
}

TEST_CASE("identical seeds give bitwise-identical values and gradients") {
    auto run = [](std::vector<double>& loss_bytes, std::vector<double>& grad_bytes) {
        Tape tape;
        Tensor x = tape.watch(rand_tensor({2, 2, 4, 4}, 80));
        Tensor w = tape.watch(rand_tensor({3, 2, 3, 3}, 81));
        Tensor m = tape.watch(rand_tensor({3, 4}, 82));
        Tensor h = global_avg_pool(relu(conv2d(x, w)));
        Tensor loss = neg(mean_all(log_softmax(matmul(h, m))));
        Tensor gi = input_gradient(loss, x);
        Tensor pen = sum_all(abs(gi));
        Tensor total = add(loss, scale(pen, 0.5));
        auto grads = backward(total, {w, m}, false);
        loss_bytes = {total.item()};
        grad_bytes = grads[0].values();
        for (double v : grads[1].values()) grad_bytes.push_back(v);
    };
    std::vector<double> l1, g1, l2, g2;
    run(l1, g1);
    run(l2, g2);
    REQUIRE(g1.size() == g2.size());
    CHECK(std::memcmp(l1.data(), l2.data(), sizeof(double) * l1.size()) == 0);
    CHECK(std::memcmp(g1.data(), g2.data(), sizeof(double) * g1.size()) == 0);
}

TEST_CASE("detach cuts the gradient path") {
    Tape tape;
    Tensor w = tape.watch(Tensor({2}, {2.0, 3.0}));
    Tensor c = w.detach();
    CHECK(!c.on_tape());
    Tensor y = sum_all(mul(c, w));
    Tensor g = backward(y, {w}, false)[0];
    CHECK(g.data()[0] == 2.0);
    CHECK(g.data()[1] == 3.0);
}

TEST_CASE("pausing the tape stops recording") {
    Tape tape;
    Tensor w = tape.watch(Tensor({2}, {1.0, 2.0}));
    const int before = tape.size();
    {
        Tape::PauseGuard guard(tape);
        Tensor y = mul(w, w);
        CHECK(!y.on_tape());
    }
    CHECK(tape.size() == before);
    Tensor z = mul(w, w);
    CHECK(z.on_tape());
}

TEST_CASE("debug mode rejects non-finite values") {
    Tape tape;
    tape.set_debug_checks(true);
    Tensor x = tape.watch(Tensor({2}, {-1.0, 0.5}));
    CHECK_THROWS_AS(log(x), std::runtime_error);

    Tape quiet;
    Tensor x2 = quiet.watch(Tensor({2}, {-1.0, 0.5}));
    Tensor y = log(x2);
    CHECK(std::isnan(y.data()[0]));
}

TEST_CASE("kink coordinates are excluded from finite differences") {
    auto r = finite_difference_check(
        [](Tape&, const std::vector<Tensor>& v) { return sum_all(abs(v[0])); },
        {Tensor({3}, {0.0, 1.0, -2.0})});
    CHECK(r.excluded >= 1);
    CHECK(r.checked == 2);
    CHECK(r.max_rel_err < 1e-4);
}

TEST_CASE("shape and argument errors are rejected") {
    Tensor a({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor b({3, 2}, {1, 2, 3, 4, 5, 6});
    CHECK_THROWS_AS(add(a, b), std::runtime_error);
    CHECK_THROWS_AS(matmul(a, a), std::runtime_error);
    CHECK_THROWS_AS(sum_axis(a, 2), std::runtime_error);
    CHECK_THROWS_AS(reshape(a, {4, 2}), std::runtime_error);
    CHECK_THROWS_AS(broadcast_axis(a, 0, 5), std::runtime_error);
    Tensor x = rand_tensor({1, 1, 4, 4}, 1);
    Tensor even_kernel = rand_tensor({1, 1, 2, 2}, 2);
    CHECK_THROWS_AS(conv2d(x, even_kernel), std::runtime_error);
    CHECK_THROWS_AS(maxpool2(rand_tensor({1, 1, 3, 4}, 3)), std::runtime_error);
    CHECK_THROWS_AS(Tensor(Shape{2, 0}), std::runtime_error);
}
