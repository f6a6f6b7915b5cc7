#include "resq/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "resq/errors.hpp"
#include "resq/rng.hpp"

namespace resq {

namespace {

constexpr std::uint32_t kImagesMagic = 0x00000803;
constexpr std::uint32_t kLabelsMagic = 0x00000801;

std::vector<std::uint8_t> read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                    std::istreambuf_iterator<char>());
    return bytes;
}

std::uint32_t read_u32_be(const std::vector<std::uint8_t>& b, std::size_t off,
                          const std::string& path) {
    if (off + 4 > b.size()) throw IoError("truncated header in " + path);
    return (std::uint32_t(b[off]) << 24) | (std::uint32_t(b[off + 1]) << 16) |
           (std::uint32_t(b[off + 2]) << 8) | std::uint32_t(b[off + 3]);
}

void write_u32_be(std::ofstream& f, std::uint32_t v) {
    const char bytes[4] = {char((v >> 24) & 0xff), char((v >> 16) & 0xff), char((v >> 8) & 0xff),
                           char(v & 0xff)};
    f.write(bytes, 4);
}

// snap to the nearest 8-bit pixel level
double quantize_pixel(double p) {
    p = std::clamp(p, 0.0, 1.0);
    return std::floor(p * 255.0 + 0.5) / 255.0;
}

}  // namespace

const std::vector<std::size_t>& Dataset::image_shape() const {
    if (images.empty()) throw ContractError("image_shape() on an empty dataset");
    return images.front().shape();
}

Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
    const auto ib = read_file(images_path);
    if (read_u32_be(ib, 0, images_path) != kImagesMagic) {
        throw FormatError("bad magic in " + images_path + " (expected IDX image file)");
    }
    const std::size_t n = read_u32_be(ib, 4, images_path);
    const std::size_t h = read_u32_be(ib, 8, images_path);
    const std::size_t w = read_u32_be(ib, 12, images_path);
    if (ib.size() != 16 + n * h * w) {
        throw IoError("truncated image payload in " + images_path + ": expected " +
                      std::to_string(16 + n * h * w) + " bytes, got " + std::to_string(ib.size()));
    }

    const auto lb = read_file(labels_path);
    if (read_u32_be(lb, 0, labels_path) != kLabelsMagic) {
        throw FormatError("bad magic in " + labels_path + " (expected IDX label file)");
    }
    const std::size_t ln = read_u32_be(lb, 4, labels_path);
    if (lb.size() != 8 + ln) {
        throw IoError("truncated label payload in " + labels_path);
    }
    if (ln != n) {
        throw FormatError("image/label count mismatch: " + std::to_string(n) + " images vs " +
                          std::to_string(ln) + " labels");
    }

    Dataset ds;
    ds.images.reserve(n);
    ds.labels.reserve(n);
    int max_label = -1;
    for (std::size_t i = 0; i < n; ++i) {
        Tensor img({1, h, w});
        const std::uint8_t* px = ib.data() + 16 + i * h * w;
        for (std::size_t p = 0; p < h * w; ++p) img[p] = px[p] / 255.0;
        ds.images.push_back(std::move(img));
        ds.labels.push_back(lb[8 + i]);
        max_label = std::max(max_label, ds.labels.back());
    }
    ds.num_classes = max_label + 1;
    return ds;
}

void write_idx(const Dataset& ds, const std::string& images_path, const std::string& labels_path) {
    if (ds.images.empty()) throw ContractError("write_idx on an empty dataset");
    const auto& shape = ds.image_shape();
    if (shape.size() != 3 || shape[0] != 1) {
        throw ContractError("write_idx requires single-channel [1,H,W] images, got " +
                            shape_str(shape));
    }
    std::ofstream fi(images_path, std::ios::binary);
    if (!fi) throw IoError("cannot write " + images_path);
    write_u32_be(fi, kImagesMagic);
    write_u32_be(fi, static_cast<std::uint32_t>(ds.size()));
    write_u32_be(fi, static_cast<std::uint32_t>(shape[1]));
    write_u32_be(fi, static_cast<std::uint32_t>(shape[2]));
    for (const Tensor& img : ds.images) {
        for (double v : img.vec()) {
            const auto byte = static_cast<std::uint8_t>(std::lround(v * 255.0));
            fi.put(static_cast<char>(byte));
        }
    }
    if (!fi) throw IoError("short write to " + images_path);

    std::ofstream fl(labels_path, std::ios::binary);
    if (!fl) throw IoError("cannot write " + labels_path);
    write_u32_be(fl, kLabelsMagic);
    write_u32_be(fl, static_cast<std::uint32_t>(ds.size()));
    for (int lab : ds.labels) fl.put(static_cast<char>(lab));
    if (!fl) throw IoError("short write to " + labels_path);
}

Dataset synth_dataset(std::uint64_t seed, std::size_t n, int classes, std::size_t side) {
    if (classes < 2) throw ContractError("synth_dataset needs at least 2 classes");
    Dataset ds;
    ds.num_classes = classes;
    if (n == 0) return ds;

    // one fixed mean pattern per class, then per-image noise on top
    std::vector<std::vector<double>> means(static_cast<std::size_t>(classes));
    for (int c = 0; c < classes; ++c) {
        Rng mr(derive_seed(seed, 1000 + static_cast<std::uint64_t>(c)));
        auto& m = means[static_cast<std::size_t>(c)];
        m.resize(side * side);
        for (auto& v : m) v = quantize_pixel(mr.uniform(0.15, 0.85));
    }

    Rng noise(derive_seed(seed, 0));
    ds.images.reserve(n);
    ds.labels.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const int c = static_cast<int>(i % static_cast<std::size_t>(classes));
        Tensor img({1, side, side});
        const auto& m = means[static_cast<std::size_t>(c)];
        for (std::size_t p = 0; p < side * side; ++p) {
            img[p] = quantize_pixel(m[p] + 0.12 * noise.normal());
        }
        ds.images.push_back(std::move(img));
        ds.labels.push_back(c);
    }
    return ds;
}

MixupBatch mixup_with_lambdas(const Dataset& ds, const std::vector<std::size_t>& indices_i,
                              const std::vector<std::size_t>& indices_j,
                              const std::vector<double>& lambdas) {
    if (indices_i.size() != indices_j.size() || indices_i.size() != lambdas.size()) {
        throw ContractError("mixup index/lambda arrays must have equal length");
    }
    if (indices_i.empty()) throw ContractError("mixup batch must be non-empty");
    const std::size_t batch = indices_i.size();
    for (std::size_t k = 0; k < batch; ++k) {
        if (indices_i[k] >= ds.size() || indices_j[k] >= ds.size()) {
            throw ContractError("mixup index out of range: pair " + std::to_string(k));
        }
    }

    const auto& ishape = ds.image_shape();
    std::vector<std::size_t> bshape{batch};
    bshape.insert(bshape.end(), ishape.begin(), ishape.end());

    MixupBatch out;
    out.inputs = Tensor(bshape);
    out.soft_labels = Tensor({batch, static_cast<std::size_t>(ds.num_classes)});
    out.lambda_draws = lambdas;

    const std::size_t pixels = ds.images.front().size();
    for (std::size_t k = 0; k < batch; ++k) {
        const double lam = lambdas[k];
        const Tensor& xi = ds.images[indices_i[k]];
        const Tensor& xj = ds.images[indices_j[k]];
        double* dst = out.inputs.data() + k * pixels;
        for (std::size_t p = 0; p < pixels; ++p) dst[p] = lam * xi[p] + (1.0 - lam) * xj[p];
        const auto yi = static_cast<std::size_t>(ds.labels[indices_i[k]]);
        const auto yj = static_cast<std::size_t>(ds.labels[indices_j[k]]);
        const std::size_t row = k * static_cast<std::size_t>(ds.num_classes);
        out.soft_labels[row + yi] += lam;
        out.soft_labels[row + yj] += 1.0 - lam;
    }
    return out;
}

MixupBatch mixup_batch(const Dataset& ds, const std::vector<std::size_t>& indices_i,
                       const std::vector<std::size_t>& indices_j, double alpha,
                       std::uint64_t seed) {
    if (alpha <= 0.0) throw ContractError("mixup alpha must be positive");
    Rng rng(seed);
    std::vector<double> lambdas(indices_i.size());
    for (auto& l : lambdas) l = rng.beta(alpha);
    return mixup_with_lambdas(ds, indices_i, indices_j, lambdas);
}

Tensor batch_inputs(const Dataset& ds, const std::vector<std::size_t>& indices) {
    if (indices.empty()) throw ContractError("batch must be non-empty");
    const auto& ishape = ds.image_shape();
    std::vector<std::size_t> bshape{indices.size()};
    bshape.insert(bshape.end(), ishape.begin(), ishape.end());
    Tensor out(bshape);
    const std::size_t pixels = ds.images.front().size();
    for (std::size_t k = 0; k < indices.size(); ++k) {
        if (indices[k] >= ds.size()) throw ContractError("batch index out of range");
        const Tensor& img = ds.images[indices[k]];
        std::copy(img.vec().begin(), img.vec().end(), out.data() + k * pixels);
    }
    return out;
}

Tensor batch_one_hot(const Dataset& ds, const std::vector<std::size_t>& indices) {
    if (indices.empty()) throw ContractError("batch must be non-empty");
    Tensor out({indices.size(), static_cast<std::size_t>(ds.num_classes)});
    for (std::size_t k = 0; k < indices.size(); ++k) {
        if (indices[k] >= ds.size()) throw ContractError("batch index out of range");
        out[k * static_cast<std::size_t>(ds.num_classes) +
            static_cast<std::size_t>(ds.labels[indices[k]])] = 1.0;
    }
    return out;
}

std::pair<Dataset, Dataset> split_dataset(const Dataset& ds, double holdout_fraction,
                                          std::uint64_t seed) {
    if (holdout_fraction < 0.0 || holdout_fraction >= 1.0) {
        throw ContractError("holdout fraction must be in [0,1)");
    }
    Rng rng(seed);
    const auto perm = rng.permutation(ds.size());
    const auto held = static_cast<std::size_t>(
        std::ceil(holdout_fraction * static_cast<double>(ds.size())));

    Dataset train, holdout;
    train.num_classes = holdout.num_classes = ds.num_classes;
    for (std::size_t k = 0; k < perm.size(); ++k) {
        const auto idx = static_cast<std::size_t>(perm[k]);
        Dataset& dst = k < held ? holdout : train;
        dst.images.push_back(ds.images[idx]);
        dst.labels.push_back(ds.labels[idx]);
    }
    return {std::move(train), std::move(holdout)};
}

}  // namespace resq
