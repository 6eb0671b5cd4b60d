// Steering adapter tests: zero-initialization semantics, the rank structure
// of dynamic residuals, static input-independence, the decode decay schedule,
// and checkpoint round-trips.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <vector>

#include "doctest.h"
#include "icsteer/checkpoint.hpp"
#include "icsteer/errors.hpp"
#include "icsteer/kernels.hpp"
#include "icsteer/rng.hpp"
#include "icsteer/steering.hpp"

using namespace icsteer;

namespace {

Matrix randm(int r, int c, Rng& rng, double s = 1.0) {
    Matrix m(r, c);
    for (auto& x : m.data) x = s * rng.normal();
    return m;
}

std::filesystem::path tmp_file(const char* name) {
    auto dir = std::filesystem::temp_directory_path() / "icsteer_test";
    std::filesystem::create_directories(dir);
    return dir / name;
}

} // namespace

TEST_CASE("adapter init: shapes, zero start, determinism") {
    AdapterSet a = AdapterSet::init(AdapterMode::Dynamic, 3, 8, 2, 2.0, 0.9, 42);
    CHECK(a.sites.size() == 3);
    for (auto& layer : a.sites)
        for (auto& site : layer) {
            CHECK(site.w_down.rows == 8);
            CHECK(site.w_down.cols == 2);
            CHECK(site.w_up.rows == 2);
            CHECK(site.w_up.cols == 8);
            bool any_down = false;
            for (double v : site.w_down.data) any_down |= (v != 0.0);
            CHECK(any_down); // down projection is randomly initialized
            for (double v : site.w_up.data) CHECK(v == 0.0);
        }
    CHECK(a.n_params() == 3 * 2 * (8 * 2 + 2 * 8));

    AdapterSet b = AdapterSet::init(AdapterMode::Dynamic, 3, 8, 2, 2.0, 0.9, 42);
    bool same = true;
    for (size_t l = 0; l < 3; ++l)
        for (int s = 0; s < 2; ++s)
            same &= (a.sites[l][size_t(s)].w_down == b.sites[l][size_t(s)].w_down);
    CHECK(same);
    AdapterSet c = AdapterSet::init(AdapterMode::Dynamic, 3, 8, 2, 2.0, 0.9, 43);
    CHECK(!(a.sites[0][0].w_down == c.sites[0][0].w_down));

    AdapterSet st = AdapterSet::init(AdapterMode::Static, 3, 8, 0, 2.0, 0.9, 42);
    CHECK(st.n_params() == 3 * 2 * 8);
    for (auto& layer : st.sites)
        for (auto& site : layer)
            for (double v : site.v.data) CHECK(v == 0.0);
}

TEST_CASE("adapter validate rejects bad hyperparameters") {
    CHECK_THROWS_AS(AdapterSet::init(AdapterMode::Dynamic, 2, 8, 2, 1.0, 0.9, 1),
                    ConfigError); // rho must exceed 1
    CHECK_THROWS_AS(AdapterSet::init(AdapterMode::Dynamic, 2, 8, 2, 2.0, 0.0, 1),
                    ConfigError); // decay in (0, 1]
    CHECK_THROWS_AS(AdapterSet::init(AdapterMode::Dynamic, 2, 8, 2, 2.0, 1.5, 1),
                    ConfigError);
    CHECK_THROWS_AS(AdapterSet::init(AdapterMode::Dynamic, 2, 8, 0, 2.0, 0.9, 1),
                    ConfigError); // dynamic needs positive rank
}

TEST_CASE("zero-initialized adapters produce exactly zero residuals") {
    Rng rng(7);
    Matrix H = randm(5, 8, rng);
    Matrix out;
    for (AdapterMode m : {AdapterMode::Dynamic, AdapterMode::Static}) {
        AdapterSet a = AdapterSet::init(m, 2, 8, 3, 2.0, 0.9, 9);
        a.delta(1, 0, H, out);
        for (double v : out.data) CHECK(v == 0.0);
    }
}

TEST_CASE("dynamic delta matches the bottleneck formula on a hand case") {
    AdapterSet a = AdapterSet::init(AdapterMode::Dynamic, 1, 2, 1, 2.0, 0.9, 1);
    auto& site = a.sites[0][1];
    site.w_down(0, 0) = 1.0;
    site.w_down(1, 0) = 0.0;
    site.w_up(0, 0) = 0.5;
    site.w_up(0, 1) = 0.25;
    Matrix H(2, 2);
    H.data = {0.7, 9.0, -1.3, 2.0}; // second column must not matter
    Matrix out;
    a.delta(0, 1, H, out);
    double g0 = num::gelu_scalar(0.7), g1 = num::gelu_scalar(-1.3);
    CHECK(out(0, 0) == doctest::Approx(0.5 * g0).epsilon(1e-15));
    CHECK(out(0, 1) == doctest::Approx(0.25 * g0).epsilon(1e-15));
    CHECK(out(1, 0) == doctest::Approx(0.5 * g1).epsilon(1e-15));
    CHECK(out(1, 1) == doctest::Approx(0.25 * g1).epsilon(1e-15));
}

TEST_CASE("static delta ignores the hidden state entirely") {
    Rng rng(11);
    AdapterSet a = AdapterSet::init(AdapterMode::Static, 2, 6, 0, 2.0, 0.9, 3);
    for (auto& layer : a.sites)
        for (auto& site : layer)
            for (auto& v : site.v.data) v = rng.normal();
    Matrix H1 = randm(4, 6, rng), H2 = randm(4, 6, rng);
    Matrix o1, o2;
    a.delta(1, 1, H1, o1);
    a.delta(1, 1, H2, o2);
    CHECK(o1 == o2);
    for (int t = 0; t < 4; ++t)
        for (int j = 0; j < 6; ++j) CHECK(o1(t, j) == a.sites[1][1].v(0, j));
}

TEST_CASE("delta_row agrees bit-exactly with the batched delta") {
    Rng rng(13);
    AdapterSet a = AdapterSet::init(AdapterMode::Dynamic, 2, 8, 3, 2.0, 0.9, 5);
    for (auto& layer : a.sites) // make the up-projection nonzero
        for (auto& site : layer)
            for (auto& v : site.w_up.data) v = 0.3 * rng.normal();
    Matrix H = randm(7, 8, rng);
    Matrix batched;
    a.delta(1, 0, H, batched);
    std::vector<double> scratch, row(8);
    for (int t = 0; t < 7; ++t) {
        a.delta_row(1, 0, H.row(t), row.data(), scratch);
        for (int j = 0; j < 8; ++j) CHECK(row[size_t(j)] == batched(t, j));
    }
}

TEST_CASE("dynamic residuals live in the rank-limited row space of w_up") {
    Rng rng(17);
    const int d = 16, r = 3;
    AdapterSet a = AdapterSet::init(AdapterMode::Dynamic, 1, d, r, 2.0, 0.9, 21);
    auto& site = a.sites[0][0];
    for (auto& v : site.w_up.data) v = rng.normal();

    // Orthonormalize the rows of w_up (Gram-Schmidt, r is tiny).
    std::vector<std::vector<double>> basis;
    for (int i = 0; i < r; ++i) {
        std::vector<double> q(site.w_up.row(i), site.w_up.row(i) + d);
        for (auto& b : basis) {
            double dot = 0;
            for (int j = 0; j < d; ++j) dot += q[size_t(j)] * b[size_t(j)];
            for (int j = 0; j < d; ++j) q[size_t(j)] -= dot * b[size_t(j)];
        }
        double nq = 0;
        for (double x : q) nq += x * x;
        nq = std::sqrt(nq);
        REQUIRE(nq > 1e-9);
        for (auto& x : q) x /= nq;
        basis.push_back(std::move(q));
    }

    // Any delta must project onto that basis with negligible residual.
    Matrix H = randm(200, d, rng, 2.0);
    Matrix out;
    a.delta(0, 0, H, out);
    for (int t = 0; t < 200; ++t) {
        std::vector<double> res(out.row(t), out.row(t) + d);
        for (auto& b : basis) {
            double dot = 0;
            for (int j = 0; j < d; ++j) dot += res[size_t(j)] * b[size_t(j)];
            for (int j = 0; j < d; ++j) res[size_t(j)] -= dot * b[size_t(j)];
        }
        double nres = 0, nout = 0;
        for (int j = 0; j < d; ++j) {
            nres += res[size_t(j)] * res[size_t(j)];
            nout += out(t, j) * out(t, j);
        }
        CHECK(std::sqrt(nres) <= 1e-10 * std::max(1.0, std::sqrt(nout)));
    }
}

TEST_CASE("decay schedule: exact endpoints and monotone decay") {
    CHECK(decay_schedule(0.9, 0) == 1.0);
    CHECK(decay_schedule(1.0, 123) == 1.0);
    CHECK(decay_schedule(0.9, 1) == doctest::Approx(0.9).epsilon(1e-15));
    CHECK(decay_schedule(0.9, 2) == doctest::Approx(0.81).epsilon(1e-15));
    for (int s = 1; s < 50; ++s)
        CHECK(decay_schedule(0.8, s) < decay_schedule(0.8, s - 1));
    CHECK_THROWS_AS(decay_schedule(0.0, 1), ConfigError);
    CHECK_THROWS_AS(decay_schedule(1.2, 1), ConfigError);
    CHECK_THROWS_AS(decay_schedule(0.9, -1), ConfigError);
}

TEST_CASE("inject wrapper validates rho and applies per-row scales") {
    Rng rng(19);
    Matrix H = randm(3, 4, rng), D = randm(3, 4, rng, 0.01), out;
    CHECK_THROWS_AS(inject(H, D, 1.0, {}, out), NumericError);
    inject(H, D, 2.0, {1.0, 0.5, 0.0}, out);
    for (int j = 0; j < 4; ++j) {
        CHECK(out(0, j) == H(0, j) + 1.0 * D(0, j));
        CHECK(out(1, j) == H(1, j) + 0.5 * D(1, j));
        CHECK(out(2, j) == H(2, j)); // scale 0: the row passes through
    }
}

TEST_CASE("adapter checkpoints round-trip bit-exactly through 32-bit storage") {
    Rng rng(23);
    AdapterSet a = AdapterSet::init(AdapterMode::Dynamic, 2, 8, 3, 1.7, 0.95, 31);
    for (auto& layer : a.sites)
        for (auto& site : layer)
            for (auto& v : site.w_up.data) v = rng.normal();
    // Keep the in-memory values on the 32-bit grid, as training does before
    // saving, so the round-trip must be lossless.
    a.for_each_param([](const std::string&, Matrix& m) { round_to_f32(m); });

    auto path = tmp_file("adapters.bin");
    save_adapters(a, path.string(), {{"note", "unit"}});
    nlohmann::json meta;
    AdapterSet b = load_adapters(path.string(), &meta);
    CHECK(meta.at("note") == "unit");
    CHECK(meta.at("mode") == "dynamic");
    CHECK(b.mode == AdapterMode::Dynamic);
    CHECK(b.d_model == 8);
    CHECK(b.n_layers == 2);
    CHECK(b.rank == 3);
    CHECK(b.rho == doctest::Approx(1.7).epsilon(1e-12));
    CHECK(b.decay_rate == doctest::Approx(0.95).epsilon(1e-12));
    for (size_t l = 0; l < 2; ++l)
        for (int s = 0; s < 2; ++s) {
            CHECK(a.sites[l][size_t(s)].w_down == b.sites[l][size_t(s)].w_down);
            CHECK(a.sites[l][size_t(s)].w_up == b.sites[l][size_t(s)].w_up);
        }
    std::filesystem::remove(path);
}

TEST_CASE("save/load is repeat-stable: identical files byte-for-byte") {
    AdapterSet a = AdapterSet::init(AdapterMode::Static, 1, 4, 0, 2.0, 0.9, 2);
    auto p1 = tmp_file("a1.bin"), p2 = tmp_file("a2.bin");
    save_adapters(a, p1.string(), {});
    save_adapters(a, p2.string(), {});
    std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
    std::string s1((std::istreambuf_iterator<char>(f1)), {});
    std::string s2((std::istreambuf_iterator<char>(f2)), {});
    CHECK(s1 == s2);
    CHECK(!s1.empty());
    std::filesystem::remove(p1);
    std::filesystem::remove(p2);
}
