#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <vector>

#include "resq/dataset.hpp"
#include "resq/errors.hpp"
#include "resq/rng.hpp"

using namespace resq;

namespace {

void write_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes) {
    std::ofstream f(path, std::ios::binary);
    f.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
}

std::vector<std::uint8_t> read_bytes(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

void append_u32_be(std::vector<std::uint8_t>& v, std::uint32_t x) {
    v.push_back((x >> 24) & 0xff);
    v.push_back((x >> 16) & 0xff);
    v.push_back((x >> 8) & 0xff);
    v.push_back(x & 0xff);
}

std::vector<std::uint8_t> make_images_file(std::uint32_t n, std::uint32_t h, std::uint32_t w,
                                           const std::vector<std::uint8_t>& payload) {
    std::vector<std::uint8_t> v;
    append_u32_be(v, 0x00000803);
    append_u32_be(v, n);
    append_u32_be(v, h);
    append_u32_be(v, w);
    v.insert(v.end(), payload.begin(), payload.end());
    return v;
}

std::vector<std::uint8_t> make_labels_file(const std::vector<std::uint8_t>& labels) {
    std::vector<std::uint8_t> v;
    append_u32_be(v, 0x00000801);
    append_u32_be(v, static_cast<std::uint32_t>(labels.size()));
    v.insert(v.end(), labels.begin(), labels.end());
    return v;
}

// Regularized incomplete beta via the standard continued fraction; this is
// the independent CDF used to judge the beta sampler.
double beta_cf(double a, double b, double x) {
    const double fpmin = 1e-300;
    const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
    double c = 1.0;
    double d = 1.0 - qab * x / qap;
    if (std::abs(d) < fpmin) d = fpmin;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= 300; ++m) {
        const int m2 = 2 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < fpmin) d = fpmin;
        c = 1.0 + aa / c;
        if (std::abs(c) < fpmin) c = fpmin;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < fpmin) d = fpmin;
        c = 1.0 + aa / c;
        if (std::abs(c) < fpmin) c = fpmin;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::abs(del - 1.0) < 3e-14) break;
    }
    return h;
}

double inc_beta(double a, double b, double x) {
    if (x <= 0.0) return 0.0;
    if (x >= 1.0) return 1.0;
    const double bt = std::exp(std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                               a * std::log(x) + b * std::log1p(-x));
    if (x < (a + 1.0) / (a + b + 2.0)) return bt * beta_cf(a, b, x) / a;
    return 1.0 - bt * beta_cf(b, a, 1.0 - x) / b;
}

double ks_statistic(std::vector<double> draws, double alpha) {
    std::sort(draws.begin(), draws.end());
    const double n = static_cast<double>(draws.size());
    double d = 0.0;
    for (std::size_t i = 0; i < draws.size(); ++i) {
        const double cdf = inc_beta(alpha, alpha, draws[i]);
        d = std::max(d, std::abs(cdf - static_cast<double>(i) / n));
        d = std::max(d, std::abs(cdf - static_cast<double>(i + 1) / n));
    }
    return d;
}

}  // namespace

TEST_CASE("load_idx decodes the documented example") {
    write_bytes("idx_imgs_a", make_images_file(1, 2, 2, {0, 255, 128, 64}));
    write_bytes("idx_labs_a", make_labels_file({3}));
    Dataset ds = load_idx("idx_imgs_a", "idx_labs_a");
    REQUIRE(ds.size() == 1);
    CHECK(ds.image_shape() == std::vector<std::size_t>{1, 2, 2});
    CHECK(ds.images[0][0] == 0.0);
    CHECK(ds.images[0][1] == 1.0);
    CHECK(ds.images[0][2] == 128.0 / 255.0);
    CHECK(ds.images[0][3] == 64.0 / 255.0);
    CHECK(ds.labels[0] == 3);
    CHECK(ds.num_classes == 4);
}

TEST_CASE("idx round-trip is byte-identical") {
    Rng rng(41);
    std::vector<std::uint8_t> payload(5 * 3 * 4);
    for (auto& b : payload) b = static_cast<std::uint8_t>(rng.index(256));
    std::vector<std::uint8_t> labels;
    for (int i = 0; i < 5; ++i) labels.push_back(static_cast<std::uint8_t>(rng.index(3)));
    const auto imgs_file = make_images_file(5, 3, 4, payload);
    const auto labs_file = make_labels_file(labels);
    write_bytes("idx_imgs_b", imgs_file);
    write_bytes("idx_labs_b", labs_file);

    Dataset ds = load_idx("idx_imgs_b", "idx_labs_b");
    write_idx(ds, "idx_imgs_b2", "idx_labs_b2");
    CHECK(read_bytes("idx_imgs_b2") == imgs_file);
    CHECK(read_bytes("idx_labs_b2") == labs_file);
}

TEST_CASE("load_idx rejects malformed files") {
    write_bytes("idx_bad_magic", make_labels_file({1}));  // labels magic where images expected
    write_bytes("idx_labs_ok", make_labels_file({1}));
    CHECK_THROWS_AS(load_idx("idx_bad_magic", "idx_labs_ok"), FormatError);

    auto truncated = make_images_file(2, 2, 2, {1, 2, 3, 4, 5});  // needs 8 payload bytes
    write_bytes("idx_trunc", truncated);
    write_bytes("idx_labs_two", make_labels_file({0, 1}));
    CHECK_THROWS_AS(load_idx("idx_trunc", "idx_labs_two"), IoError);

    write_bytes("idx_imgs_one", make_images_file(1, 2, 2, {0, 0, 0, 0}));
    CHECK_THROWS_AS(load_idx("idx_imgs_one", "idx_labs_two"), FormatError);

    CHECK_THROWS_AS(load_idx("idx_does_not_exist", "idx_labs_ok"), IoError);
}

TEST_CASE("synth_dataset is deterministic and 8-bit clean") {
    Dataset a = synth_dataset(7, 60, 3, 6);
    Dataset b = synth_dataset(7, 60, 3, 6);
    REQUIRE(a.size() == 60);
    CHECK(a.num_classes == 3);
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a.labels[i] == b.labels[i]);
        CHECK(a.images[i].vec() == b.images[i].vec());
        for (double v : a.images[i].vec()) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
            CHECK(std::abs(v * 255.0 - std::round(v * 255.0)) < 1e-9);
        }
    }
    Dataset c = synth_dataset(8, 60, 3, 6);
    bool any_diff = false;
    for (std::size_t i = 0; i < a.size() && !any_diff; ++i) any_diff = a.images[i].vec() != c.images[i].vec();
    CHECK(any_diff);

    CHECK(synth_dataset(7, 0, 3, 6).size() == 0);
    CHECK_THROWS_AS(synth_dataset(7, 10, 1, 6), ContractError);
}

TEST_CASE("synth class means are far apart") {
    const std::size_t side = 6;
    Dataset ds = synth_dataset(11, 600, 3, side);
    std::vector<std::vector<double>> mean(3, std::vector<double>(side * side, 0.0));
    std::vector<int> count(3, 0);
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const auto c = static_cast<std::size_t>(ds.labels[i]);
        ++count[c];
        for (std::size_t p = 0; p < side * side; ++p) mean[c][p] += ds.images[i][p];
    }
    for (std::size_t c = 0; c < 3; ++c)
        for (auto& v : mean[c]) v /= count[c];
    for (std::size_t a = 0; a < 3; ++a)
        for (std::size_t b = a + 1; b < 3; ++b) {
            int differing = 0;
            for (std::size_t p = 0; p < side * side; ++p)
                if (std::abs(mean[a][p] - mean[b][p]) > 2.0 / 255.0) ++differing;
            CHECK(differing >= static_cast<int>(side * side / 4));
        }
}

TEST_CASE("mixup boundary coefficients") {
    Dataset ds;
    ds.num_classes = 2;
    ds.images.push_back(Tensor::full({1, 2, 2}, 0.0));
    ds.images.push_back(Tensor::full({1, 2, 2}, 1.0));
    ds.labels = {0, 1};

    MixupBatch one = mixup_with_lambdas(ds, {0}, {1}, {1.0});
    for (std::size_t p = 0; p < 4; ++p) CHECK(one.inputs[p] == 0.0);
    CHECK(one.soft_labels[0] == 1.0);
    CHECK(one.soft_labels[1] == 0.0);

    MixupBatch half = mixup_with_lambdas(ds, {0}, {1}, {0.5});
    for (std::size_t p = 0; p < 4; ++p) CHECK(half.inputs[p] == 0.5);
    CHECK(half.soft_labels[0] == 0.5);
    CHECK(half.soft_labels[1] == 0.5);

    // same label on both sides collapses to a single one-hot entry
    ds.labels = {1, 1};
    MixupBatch same = mixup_with_lambdas(ds, {0}, {1}, {0.3});
    CHECK(same.soft_labels[0] == 0.0);
    CHECK(same.soft_labels[1] == 1.0);
}

TEST_CASE("mixup validates its inputs") {
    Dataset ds = synth_dataset(3, 10, 2, 4);
    CHECK_THROWS_AS(mixup_batch(ds, {0}, {10}, 1.0, 5), ContractError);
    CHECK_THROWS_AS(mixup_batch(ds, {11}, {0}, 1.0, 5), ContractError);
    CHECK_THROWS_AS(mixup_batch(ds, {0, 1}, {1}, 1.0, 5), ContractError);
    CHECK_THROWS_AS(mixup_batch(ds, {0}, {1}, 0.0, 5), ContractError);
    CHECK_THROWS_AS(mixup_batch(ds, {}, {}, 1.0, 5), ContractError);
}

TEST_CASE("mixup convexity and soft-label normalization") {
    Dataset ds = synth_dataset(13, 40, 4, 5);
    Rng rng(17);
    std::vector<std::size_t> ii, jj;
    for (int k = 0; k < 64; ++k) {
        ii.push_back(rng.index(ds.size()));
        jj.push_back(rng.index(ds.size()));
    }
    MixupBatch mb = mixup_batch(ds, ii, jj, 0.2, 23);
    const std::size_t pixels = ds.images[0].size();
    for (std::size_t k = 0; k < ii.size(); ++k) {
        for (std::size_t p = 0; p < pixels; ++p) {
            const double xi = ds.images[ii[k]][p], xj = ds.images[jj[k]][p];
            const double v = mb.inputs[k * pixels + p];
            CHECK(v >= std::min(xi, xj) - 1e-12);
            CHECK(v <= std::max(xi, xj) + 1e-12);
        }
        double sum = 0.0;
        int nonzero = 0;
        for (int c = 0; c < 4; ++c) {
            const double s = mb.soft_labels[k * 4 + static_cast<std::size_t>(c)];
            sum += s;
            if (s != 0.0) ++nonzero;
        }
        CHECK(std::abs(sum - 1.0) <= 1e-9);
        CHECK(nonzero <= 2);
    }
}

TEST_CASE("lambda draws with alpha=1 average one half") {
    Dataset ds;
    ds.num_classes = 2;
    ds.images.push_back(Tensor::full({1, 1, 1}, 0.0));
    ds.images.push_back(Tensor::full({1, 1, 1}, 1.0));
    ds.labels = {0, 1};
    std::vector<std::size_t> ii(10000, 0), jj(10000, 1);
    MixupBatch mb = mixup_batch(ds, ii, jj, 1.0, 31);
    double sum = 0.0;
    for (double l : mb.lambda_draws) sum += l;
    CHECK(std::abs(sum / 10000.0 - 0.5) < 0.02);
}

TEST_CASE("beta sampler passes a KS test against the true CDF") {
    for (double alpha : {0.2, 1.0}) {
        Rng rng(alpha == 0.2 ? 101 : 202);
        std::vector<double> draws(10000);
        for (auto& d : draws) d = rng.beta(alpha);
        CHECK(ks_statistic(std::move(draws), alpha) < 0.02);
    }
}

TEST_CASE("split_dataset partitions deterministically") {
    Dataset ds = synth_dataset(19, 100, 4, 4);
    auto [train, hold] = split_dataset(ds, 0.1, 77);
    CHECK(train.size() == 90);
    CHECK(hold.size() == 10);
    CHECK(train.num_classes == 4);
    CHECK(hold.num_classes == 4);

    auto [train2, hold2] = split_dataset(ds, 0.1, 77);
    for (std::size_t i = 0; i < hold.size(); ++i) {
        CHECK(hold.labels[i] == hold2.labels[i]);
        CHECK(hold.images[i].vec() == hold2.images[i].vec());
    }
    CHECK_THROWS_AS(split_dataset(ds, 1.0, 1), ContractError);
}
