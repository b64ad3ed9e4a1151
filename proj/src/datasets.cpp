#include "fedilc/datasets.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <map>
#include <numbers>
#include <numeric>
#include <sstream>

#include "fedilc/random.hpp"

namespace fedilc {

void LabeledDataset::validate() const {
    if (labels.empty()) throw std::invalid_argument("LabeledDataset: no samples");
    if (inputs.rows() != labels.size()) throw std::invalid_argument("LabeledDataset: inputs/labels row mismatch");
    if (!sub_env.empty() && sub_env.size() != labels.size()) throw std::invalid_argument("LabeledDataset: sub_env length mismatch");
    if (!source_index.empty() && source_index.size() != labels.size()) {
        throw std::invalid_argument("LabeledDataset: source_index length mismatch");
    }
    for (double x : inputs.values()) {
        if (!std::isfinite(x)) throw std::invalid_argument("LabeledDataset: non-finite feature");
    }
}

LabeledDataset LabeledDataset::subset(std::span<const std::size_t> indices) const {
    LabeledDataset out;
    out.inputs = inputs.select_rows(indices);
    out.meta = meta;
    out.labels.reserve(indices.size());
    for (std::size_t i : indices) {
        out.labels.push_back(labels[i]);
        if (!sub_env.empty()) out.sub_env.push_back(sub_env[i]);
        if (!source_index.empty()) out.source_index.push_back(source_index[i]);
    }
    return out;
}

void FederationDataset::validate() const {
    if (silos.empty()) throw std::invalid_argument("FederationDataset: no silos");
    const std::size_t d = feature_dim();
    for (const auto& s : silos) {
        s.train.validate();
        if (s.train.inputs.cols() != d) throw std::invalid_argument("FederationDataset: silo feature width mismatch");
        if (!s.val.empty()) {
            s.val.validate();
            if (s.val.inputs.cols() != d) throw std::invalid_argument("FederationDataset: val feature width mismatch");
        }
    }
    if (!ood_test.empty()) {
        ood_test.validate();
        if (ood_test.inputs.cols() != d) throw std::invalid_argument("FederationDataset: OOD feature width mismatch");
    }
}

namespace {

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t read_be32(std::span<const std::uint8_t> bytes, std::size_t offset) {
    if (offset + 4 > bytes.size()) throw FormatError("IDX: truncated header", bytes.size());
    return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
           (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

std::vector<std::size_t> iota_indices(std::size_t n) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    return idx;
}

// Splits [0, n) into `parts` contiguous ranges whose sizes differ by at most one.
std::vector<std::pair<std::size_t, std::size_t>> even_ranges(std::size_t n, std::size_t parts) {
    std::vector<std::pair<std::size_t, std::size_t>> out;
    std::size_t begin = 0;
    for (std::size_t p = 0; p < parts; ++p) {
        const std::size_t len = n / parts + (p < n % parts ? 1 : 0);
        out.emplace_back(begin, begin + len);
        begin += len;
    }
    return out;
}

void check_prob(double p, const char* what) {
    if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument(std::string(what) + ": probability outside [0,1]");
}

// Train gets the first round((1 - val_fraction) * n) rows, at least one.
Silo split_train_val(const LabeledDataset& all, double val_fraction) {
    const std::size_t n = all.size();
    auto n_train = static_cast<std::size_t>(std::llround((1.0 - val_fraction) * static_cast<double>(n)));
    n_train = std::clamp<std::size_t>(n_train, 1, n);
    const auto idx = iota_indices(n);
    Silo silo;
    silo.train = all.subset(std::span(idx).first(n_train));
    silo.val = all.subset(std::span(idx).subspan(n_train));
    return silo;
}

}  // namespace

IdxArray parse_idx(std::span<const std::uint8_t> bytes) {
    if (bytes.empty()) throw FormatError("IDX: empty file", 0);
    IdxArray out;
    out.magic = read_be32(bytes, 0);
    std::size_t ndims = 0;
    if (out.magic == kIdxImagesMagic) {
        ndims = 3;
    } else if (out.magic == kIdxLabelsMagic) {
        ndims = 1;
    } else {
        throw FormatError("IDX: unsupported magic number", 0);
    }
    std::size_t count = 1;
    for (std::size_t d = 0; d < ndims; ++d) {
        out.dims.push_back(read_be32(bytes, 4 + 4 * d));
        count *= out.dims.back();
    }
    const std::size_t header = 4 + 4 * ndims;
    if (bytes.size() < header + count) throw FormatError("IDX: truncated payload", bytes.size());
    if (bytes.size() > header + count) throw FormatError("IDX: trailing bytes after payload", header + count);
    out.data.assign(bytes.begin() + static_cast<std::ptrdiff_t>(header), bytes.end());
    return out;
}

IdxArray load_idx(const std::filesystem::path& path) { return parse_idx(read_bytes(path)); }

Matrix idx_images(const IdxArray& idx) {
    if (idx.magic != kIdxImagesMagic) throw FormatError("IDX: not an image file", 0);
    const std::size_t n = idx.dims[0];
    const std::size_t d = std::size_t{idx.dims[1]} * idx.dims[2];
    Matrix m(n, d);
    auto v = m.values();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<double>(idx.data[i]) / 255.0;
    return m;
}

std::vector<int> idx_labels(const IdxArray& idx) {
    if (idx.magic != kIdxLabelsMagic) throw FormatError("IDX: not a label file", 0);
    return {idx.data.begin(), idx.data.end()};
}

LabeledDataset load_mnist(const std::filesystem::path& images, const std::filesystem::path& labels) {
    LabeledDataset out;
    out.inputs = idx_images(load_idx(images));
    out.labels = idx_labels(load_idx(labels));
    if (out.inputs.rows() != out.labels.size()) throw std::runtime_error("MNIST: image and label counts differ");
    out.meta = "mnist:" + images.filename().string();
    return out;
}

LabeledDataset parse_cifar(std::span<const std::uint8_t> bytes) {
    if (bytes.empty() || bytes.size() % kCifarRecordBytes != 0) {
        throw FormatError("CIFAR: size is not a multiple of 3073", bytes.size() - bytes.size() % kCifarRecordBytes);
    }
    const std::size_t n = bytes.size() / kCifarRecordBytes;
    LabeledDataset out;
    out.inputs = Matrix(n, 3072);
    out.labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t base = i * kCifarRecordBytes;
        if (bytes[base] > 9) throw FormatError("CIFAR: label out of range", base);
        out.labels[i] = bytes[base];
        auto row = out.inputs.row(i);
        for (std::size_t c = 0; c < 3; ++c) {
            for (std::size_t p = 0; p < 1024; ++p) row[p * 3 + c] = static_cast<double>(bytes[base + 1 + c * 1024 + p]) / 255.0;
        }
    }
    out.meta = "cifar10";
    return out;
}

LabeledDataset load_cifar(std::span<const std::filesystem::path> paths) {
    LabeledDataset all;
    for (const auto& p : paths) {
        LabeledDataset part = parse_cifar(read_bytes(p));
        for (std::size_t i = 0; i < part.size(); ++i) {
            all.inputs.append_row(part.inputs.row(i));
            all.labels.push_back(part.labels[i]);
        }
    }
    all.meta = "cifar10";
    return all;
}

Image rotate_image(const Image& img, double degrees) {
    if (degrees == 0.0) return img;
    const double rad = degrees * std::numbers::pi / 180.0;
    const double cs = std::cos(rad);
    const double sn = std::sin(rad);
    const double cx = (static_cast<double>(img.width) - 1.0) / 2.0;
    const double cy = (static_cast<double>(img.height) - 1.0) / 2.0;
    Image out{img.height, img.width, img.channels, std::vector<double>(img.pixels.size(), 0.0)};
    auto sample = [&](long y, long x, std::size_t c) -> double {
        if (y < 0 || x < 0 || y >= static_cast<long>(img.height) || x >= static_cast<long>(img.width)) return 0.0;
        return img.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x), c);
    };
    for (std::size_t y = 0; y < img.height; ++y) {
        for (std::size_t x = 0; x < img.width; ++x) {
            const double u = static_cast<double>(x) - cx;
            const double v = static_cast<double>(y) - cy;
            const double sx = cx + u * cs - v * sn;
            const double sy = cy + u * sn + v * cs;
            const double fx0 = std::floor(sx);
            const double fy0 = std::floor(sy);
            const double ax = sx - fx0;
            const double ay = sy - fy0;
            const auto x0 = static_cast<long>(fx0);
            const auto y0 = static_cast<long>(fy0);
            for (std::size_t c = 0; c < img.channels; ++c) {
                const double top = (1.0 - ax) * sample(y0, x0, c) + ax * sample(y0, x0 + 1, c);
                const double bottom = (1.0 - ax) * sample(y0 + 1, x0, c) + ax * sample(y0 + 1, x0 + 1, c);
                out.at(y, x, c) = (1.0 - ay) * top + ay * bottom;
            }
        }
    }
    return out;
}

Image downscale(const Image& img, std::size_t out_height, std::size_t out_width) {
    if (out_height == 0 || out_width == 0 || img.height % out_height != 0 || img.width % out_width != 0) {
        throw std::invalid_argument("downscale: output size must divide input size");
    }
    const std::size_t fy = img.height / out_height;
    const std::size_t fx = img.width / out_width;
    Image out{out_height, out_width, img.channels, std::vector<double>(out_height * out_width * img.channels, 0.0)};
    const double inv = 1.0 / static_cast<double>(fx * fy);
    for (std::size_t y = 0; y < out_height; ++y) {
        for (std::size_t x = 0; x < out_width; ++x) {
            for (std::size_t c = 0; c < img.channels; ++c) {
                double s = 0.0;
                for (std::size_t dy = 0; dy < fy; ++dy) {
                    for (std::size_t dx = 0; dx < fx; ++dx) s += img.at(y * fy + dy, x * fx + dx, c);
                }
                out.at(y, x, c) = s * inv;
            }
        }
    }
    return out;
}

Image to_grayscale(const Image& img) {
    if (img.channels == 1) return img;
    if (img.channels != 3) throw std::invalid_argument("to_grayscale: expected 1 or 3 channels");
    Image out{img.height, img.width, 1, std::vector<double>(img.height * img.width)};
    for (std::size_t y = 0; y < img.height; ++y) {
        for (std::size_t x = 0; x < img.width; ++x) {
            out.at(y, x, 0) = 0.299 * img.at(y, x, 0) + 0.587 * img.at(y, x, 1) + 0.114 * img.at(y, x, 2);
        }
    }
    return out;
}

FederationDataset make_color_digits(const LabeledDataset& base, std::span<const double> flip_probs,
                                    double ood_color_flip, double ood_label_flip, std::uint64_t seed,
                                    const ColorDigitsOptions& options) {
    for (double p : flip_probs) check_prob(p, "make_color_digits");
    check_prob(ood_color_flip, "make_color_digits");
    check_prob(ood_label_flip, "make_color_digits");
    if (flip_probs.empty()) throw std::invalid_argument("make_color_digits: no silos");
    const std::size_t side = options.side;
    if (base.inputs.cols() != side * side) throw std::invalid_argument("make_color_digits: base images must be side x side");
    if (base.size() < flip_probs.size() + 1) throw std::invalid_argument("make_color_digits: base set too small");
    const std::size_t small = side / options.downsample;
    const std::size_t plane = small * small;

    Rng order_rng(stream_seed(seed, 0x636f6c6f72ULL));
    auto order = iota_indices(base.size());
    order_rng.shuffle(std::span(order));

    const auto ranges = even_ranges(base.size(), flip_probs.size() + 1);
    auto build = [&](std::size_t part, double color_flip, double label_flip) {
        Rng rng(stream_seed(seed, part + 1));
        LabeledDataset ds;
        const auto [begin, end] = ranges[part];
        ds.inputs = Matrix(end - begin, 2 * plane);
        for (std::size_t r = begin; r < end; ++r) {
            const std::size_t src = order[r];
            const int digit = base.labels[src];
            if (digit < 0 || digit > 9) throw std::invalid_argument("make_color_digits: base labels must be digits 0-9");
            int y = digit >= 5 ? 1 : 0;
            if (rng.bernoulli(label_flip)) y = 1 - y;
            int color = y;
            if (rng.bernoulli(color_flip)) color = 1 - color;

            Image img{side, side, 1, std::vector<double>(base.inputs.row(src).begin(), base.inputs.row(src).end())};
            const Image reduced = options.downsample > 1 ? downscale(img, small, small) : img;
            auto row = ds.inputs.row(r - begin);
            const std::size_t channel = color == 1 ? 0 : 1;  // red, green
            std::copy(reduced.pixels.begin(), reduced.pixels.end(), row.begin() + static_cast<std::ptrdiff_t>(channel * plane));
            ds.labels.push_back(y);
            ds.source_index.push_back(src);
        }
        return ds;
    };

    FederationDataset fed;
    for (std::size_t e = 0; e < flip_probs.size(); ++e) {
        LabeledDataset all = build(e, flip_probs[e], 0.0);
        all.meta = "color_digits silo " + std::to_string(e);
        fed.silos.push_back(split_train_val(all, options.val_fraction));
    }
    fed.ood_test = build(flip_probs.size(), ood_color_flip, ood_label_flip);
    fed.ood_test.meta = "color_digits ood";
    return fed;
}

FederationDataset make_rotated_silos(const LabeledDataset& base, ImageShape shape,
                                     const std::vector<std::vector<double>>& silo_degrees,
                                     std::pair<double, double> ood_range, std::uint64_t seed,
                                     const RotatedOptions& options) {
    if (silo_degrees.empty()) throw std::invalid_argument("make_rotated_silos: no silos");
    for (const auto& d : silo_degrees) {
        if (d.empty()) throw std::invalid_argument("make_rotated_silos: silo without angles");
    }
    if (base.inputs.cols() != shape.height * shape.width * shape.channels) {
        throw std::invalid_argument("make_rotated_silos: base width does not match image shape");
    }
    if (base.size() < silo_degrees.size() + 1) throw std::invalid_argument("make_rotated_silos: base set too small");

    Rng order_rng(stream_seed(seed, 0x726f74ULL));
    auto order = iota_indices(base.size());
    order_rng.shuffle(std::span(order));
    const auto ranges = even_ranges(base.size(), silo_degrees.size() + 1);
    const std::size_t out_side = options.out_side;

    auto render = [&](std::size_t src, double degrees) {
        Image img{shape.height, shape.width, shape.channels,
                  std::vector<double>(base.inputs.row(src).begin(), base.inputs.row(src).end())};
        return downscale(rotate_image(to_grayscale(img), degrees), out_side, out_side).pixels;
    };

    FederationDataset fed;
    for (std::size_t e = 0; e < silo_degrees.size(); ++e) {
        const auto [begin, end] = ranges[e];
        const auto& angles = silo_degrees[e];
        const auto env_ranges = even_ranges(end - begin, angles.size());
        LabeledDataset all;
        all.inputs = Matrix(end - begin, out_side * out_side);
        for (std::size_t env = 0; env < angles.size(); ++env) {
            for (std::size_t r = env_ranges[env].first; r < env_ranges[env].second; ++r) {
                const std::size_t src = order[begin + r];
                const auto px = render(src, angles[env]);
                std::copy(px.begin(), px.end(), all.inputs.row(r).begin());
                all.labels.push_back(base.labels[src]);
                all.sub_env.push_back(static_cast<int>(env));
                all.source_index.push_back(src);
            }
        }
        // Interleave sub-environments before the train/val cut.
        Rng silo_rng(stream_seed(seed, e + 1));
        auto perm = iota_indices(all.size());
        silo_rng.shuffle(std::span(perm));
        all = all.subset(perm);
        all.meta = "rotated silo " + std::to_string(e);
        fed.silos.push_back(split_train_val(all, options.val_fraction));
    }

    Rng ood_rng(stream_seed(seed, 0x6f6f64ULL));
    const auto [begin, end] = ranges.back();
    fed.ood_test.inputs = Matrix(end - begin, out_side * out_side);
    for (std::size_t r = begin; r < end; ++r) {
        const std::size_t src = order[r];
        const double angle = ood_rng.uniform(ood_range.first, ood_range.second);
        const auto px = render(src, angle);
        std::copy(px.begin(), px.end(), fed.ood_test.inputs.row(r - begin).begin());
        fed.ood_test.labels.push_back(base.labels[src]);
        fed.ood_test.source_index.push_back(src);
    }
    fed.ood_test.meta = "rotated ood";
    return fed;
}

FederationDataset make_synth_spurious(std::size_t n_per_silo, std::size_t d_inv, std::span<const double> flip_probs,
                                      double ood_flip, std::uint64_t seed) {
    if (d_inv < 1) throw std::invalid_argument("make_synth_spurious: d_inv must be >= 1");
    if (n_per_silo < 2) throw std::invalid_argument("make_synth_spurious: need at least 2 samples per silo");
    if (flip_probs.empty()) throw std::invalid_argument("make_synth_spurious: no silos");
    for (double p : flip_probs) check_prob(p, "make_synth_spurious");
    check_prob(ood_flip, "make_synth_spurious");

    std::size_t next_index = 0;
    auto build = [&](std::uint64_t stream, double flip) {
        Rng rng(stream_seed(seed, stream));
        LabeledDataset ds;
        ds.inputs = Matrix(n_per_silo, d_inv + 1);
        for (std::size_t i = 0; i < n_per_silo; ++i) {
            const int y = rng.bernoulli(0.5) ? 1 : 0;
            auto row = ds.inputs.row(i);
            const double mu = y == 1 ? 1.0 : -1.0;
            for (std::size_t j = 0; j < d_inv; ++j) row[j] = rng.normal(mu, 1.0);
            const int spurious = rng.bernoulli(flip) ? 1 - y : y;
            row[d_inv] = static_cast<double>(spurious);
            ds.labels.push_back(y);
            ds.source_index.push_back(next_index++);
        }
        return ds;
    };

    FederationDataset fed;
    for (std::size_t e = 0; e < flip_probs.size(); ++e) {
        LabeledDataset all = build(e + 1, flip_probs[e]);
        all.meta = "synth_spurious silo " + std::to_string(e);
        fed.silos.push_back(split_train_val(all, 0.2));
    }
    fed.ood_test = build(0, ood_flip);
    fed.ood_test.meta = "synth_spurious ood";
    return fed;
}

namespace {

double logistic(double x) { return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

// Training silos are the largest groups (ties: earlier group first), in
// descending size order; every other group pools into the OOD set.
std::vector<std::size_t> top_groups(std::span<const std::size_t> sizes, std::size_t keep) {
    auto idx = iota_indices(sizes.size());
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return sizes[a] > sizes[b]; });
    idx.resize(std::min(keep, idx.size()));
    return idx;
}

}  // namespace

ClinicalData make_synth_clinical(std::size_t n_hospitals, std::size_t n_features, double positive_rate,
                                 std::uint64_t seed, const ClinicalOptions& options) {
    if (n_hospitals <= options.training_hospitals) {
        throw std::invalid_argument("make_synth_clinical: need more hospitals than training silos");
    }
    if (n_features < 1) throw std::invalid_argument("make_synth_clinical: need at least one feature");
    if (!(positive_rate > 0.0 && positive_rate < 1.0)) throw std::invalid_argument("make_synth_clinical: positive_rate must be in (0,1)");
    if (options.n_patients < n_hospitals) throw std::invalid_argument("make_synth_clinical: fewer patients than hospitals");

    Rng rng(stream_seed(seed, 0x636c696eULL));

    // Hospital sizes: log-normal weights, largest-remainder rounding, at least 1 each.
    std::vector<double> weight(n_hospitals);
    double wsum = 0.0;
    for (double& w : weight) {
        w = std::exp(rng.normal(0.0, 1.0));
        wsum += w;
    }
    const std::size_t spare = options.n_patients - n_hospitals;
    std::vector<std::size_t> sizes(n_hospitals, 1);
    std::vector<std::pair<double, std::size_t>> remainders;
    std::size_t assigned = 0;
    for (std::size_t h = 0; h < n_hospitals; ++h) {
        const double exact = static_cast<double>(spare) * weight[h] / wsum;
        const auto whole = static_cast<std::size_t>(std::floor(exact));
        sizes[h] += whole;
        assigned += whole;
        remainders.emplace_back(exact - static_cast<double>(whole), h);
    }
    std::stable_sort(remainders.begin(), remainders.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
    for (std::size_t i = 0; assigned < spare; ++i, ++assigned) sizes[remainders[i].second] += 1;

    // Feature popularity with mean_active expected active features per patient.
    std::vector<double> popularity(n_features);
    double psum = 0.0;
    for (double& p : popularity) {
        p = std::exp(rng.normal(0.0, 1.0));
        psum += p;
    }
    for (double& p : popularity) p = std::min(0.5, p * options.mean_active / psum);
    std::vector<double> effect(n_features);
    for (double& b : effect) b = rng.normal(0.0, 0.5);

    std::vector<double> hospital_shift(n_hospitals);
    for (double& s : hospital_shift) s = rng.normal(0.0, 0.5);

    Matrix features(options.n_patients, n_features);
    std::vector<double> score(options.n_patients);
    std::vector<std::size_t> hospital_of(options.n_patients);
    std::size_t row = 0;
    for (std::size_t h = 0; h < n_hospitals; ++h) {
        std::vector<double> local(n_features);
        for (std::size_t f = 0; f < n_features; ++f) local[f] = std::min(0.9, popularity[f] * std::exp(rng.normal(0.0, 0.3)));
        for (std::size_t i = 0; i < sizes[h]; ++i, ++row) {
            auto x = features.row(row);
            double s = hospital_shift[h];
            for (std::size_t f = 0; f < n_features; ++f) {
                if (rng.bernoulli(local[f])) {
                    x[f] = 1.0;
                    s += effect[f];
                }
            }
            score[row] = s;
            hospital_of[row] = h;
        }
    }

    // Intercept such that the mean predicted probability equals positive_rate.
    auto mean_prob = [&](double b) {
        double total = 0.0;
        for (double s : score) total += logistic(b + s);
        return total / static_cast<double>(score.size());
    };
    double lo = -30.0;
    double hi = 30.0;
    for (int it = 0; it < 200; ++it) {
        const double mid = 0.5 * (lo + hi);
        (mean_prob(mid) < positive_rate ? lo : hi) = mid;
    }
    const double intercept = 0.5 * (lo + hi);

    LabeledDataset pooled;
    pooled.inputs = std::move(features);
    pooled.labels.resize(options.n_patients);
    pooled.source_index = iota_indices(options.n_patients);
    std::size_t positives = 0;
    for (std::size_t i = 0; i < options.n_patients; ++i) {
        pooled.labels[i] = rng.bernoulli(logistic(intercept + score[i])) ? 1 : 0;
        positives += static_cast<std::size_t>(pooled.labels[i]);
    }

    ClinicalData out;
    out.hospital_sizes = sizes;
    out.pooled_positive_rate = static_cast<double>(positives) / static_cast<double>(options.n_patients);
    out.silo_hospitals = top_groups(sizes, options.training_hospitals);

    std::vector<std::vector<std::size_t>> members(n_hospitals);
    for (std::size_t i = 0; i < options.n_patients; ++i) members[hospital_of[i]].push_back(i);
    std::vector<bool> is_silo(n_hospitals, false);
    for (std::size_t h : out.silo_hospitals) {
        is_silo[h] = true;
        LabeledDataset all = pooled.subset(members[h]);
        all.meta = "synth_clinical hospital " + std::to_string(h);
        out.data.silos.push_back(split_train_val(all, 1.0 - options.train_fraction));
    }
    std::vector<std::size_t> ood_rows;
    for (std::size_t h = 0; h < n_hospitals; ++h) {
        if (!is_silo[h]) ood_rows.insert(ood_rows.end(), members[h].begin(), members[h].end());
    }
    out.data.ood_test = pooled.subset(ood_rows);
    out.data.ood_test.meta = "synth_clinical ood";
    return out;
}

namespace {

std::vector<std::string_view> split_csv_line(std::string_view line) {
    std::vector<std::string_view> cells;
    std::size_t start = 0;
    while (true) {
        const std::size_t comma = line.find(',', start);
        cells.push_back(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
        if (comma == std::string_view::npos) break;
        start = comma + 1;
    }
    for (auto& c : cells) {
        while (!c.empty() && (c.back() == '\r' || c.back() == ' ')) c.remove_suffix(1);
        while (!c.empty() && c.front() == ' ') c.remove_prefix(1);
    }
    return cells;
}

int parse_binary(std::string_view cell, std::size_t line_no, const char* what) {
    if (cell == "0") return 0;
    if (cell == "1") return 1;
    throw SchemaError("line " + std::to_string(line_no) + ": " + what + " must be 0 or 1, got '" + std::string(cell) + "'");
}

double parse_double(std::string_view cell) {
    double v = 0.0;
    const auto res = std::from_chars(cell.data(), cell.data() + cell.size(), v);
    if (res.ec != std::errc() || res.ptr != cell.data() + cell.size()) {
        throw SchemaError("not a number: '" + std::string(cell) + "'");
    }
    return v;
}

}  // namespace

ClinicalCsv parse_clinical_csv(std::string_view text, const ClinicalOptions& options) {
    std::vector<std::string_view> lines;
    for (std::size_t start = 0; start < text.size();) {
        std::size_t nl = text.find('\n', start);
        if (nl == std::string_view::npos) nl = text.size();
        std::string_view line = text.substr(start, nl - start);
        if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
        if (!line.empty()) lines.push_back(line);
        start = nl + 1;
    }
    if (lines.empty()) throw SchemaError("clinical CSV: missing header");
    const auto header = split_csv_line(lines.front());
    if (header.size() < 3 || header[0] != "hospital_id" || header[1] != "label") {
        throw SchemaError("clinical CSV: header must start with hospital_id,label and list at least one feature");
    }
    if (lines.size() < 2) throw SchemaError("clinical CSV: no data rows");
    const std::size_t n_features = header.size() - 2;

    std::vector<std::string> hospital_names;
    std::map<std::string, std::size_t, std::less<>> hospital_index;
    std::vector<std::vector<std::size_t>> members;
    LabeledDataset pooled;
    pooled.inputs = Matrix(lines.size() - 1, n_features);
    for (std::size_t r = 1; r < lines.size(); ++r) {
        const auto cells = split_csv_line(lines[r]);
        if (cells.size() != header.size()) {
            throw SchemaError("clinical CSV line " + std::to_string(r + 1) + ": expected " + std::to_string(header.size()) +
                              " columns, got " + std::to_string(cells.size()));
        }
        if (cells[0].empty()) throw SchemaError("clinical CSV line " + std::to_string(r + 1) + ": empty hospital_id");
        auto it = hospital_index.find(cells[0]);
        if (it == hospital_index.end()) {
            it = hospital_index.emplace(std::string(cells[0]), hospital_names.size()).first;
            hospital_names.emplace_back(cells[0]);
            members.emplace_back();
        }
        members[it->second].push_back(r - 1);
        pooled.labels.push_back(parse_binary(cells[1], r + 1, "label"));
        auto x = pooled.inputs.row(r - 1);
        for (std::size_t f = 0; f < n_features; ++f) x[f] = parse_binary(cells[f + 2], r + 1, "feature");
    }
    pooled.source_index = iota_indices(pooled.size());

    std::vector<std::size_t> sizes;
    for (const auto& m : members) sizes.push_back(m.size());
    ClinicalCsv out;
    std::vector<bool> is_silo(members.size(), false);
    for (std::size_t h : top_groups(sizes, options.training_hospitals)) {
        is_silo[h] = true;
        LabeledDataset all = pooled.subset(members[h]);
        all.meta = "clinical hospital " + hospital_names[h];
        out.data.silos.push_back(split_train_val(all, 1.0 - options.train_fraction));
        out.silo_hospitals.push_back(hospital_names[h]);
    }
    std::vector<std::size_t> ood_rows;
    for (std::size_t h = 0; h < members.size(); ++h) {
        if (!is_silo[h]) ood_rows.insert(ood_rows.end(), members[h].begin(), members[h].end());
    }
    out.data.ood_test = pooled.subset(ood_rows);
    // With no remaining hospitals the OOD set is empty but keeps the feature width.
    if (ood_rows.empty()) out.data.ood_test.inputs = Matrix(0, n_features);
    out.data.ood_test.meta = "clinical ood";
    return out;
}

ClinicalCsv load_clinical_csv(const std::filesystem::path& path, const ClinicalOptions& options) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_clinical_csv(ss.str(), options);
}

LabeledDataset make_synth_images(std::size_t n, ImageShape shape, int classes, std::uint64_t seed) {
    if (classes < 2) throw std::invalid_argument("make_synth_images: need at least 2 classes");
    Rng rng(stream_seed(seed, 0x696d67ULL));
    LabeledDataset out;
    out.inputs = Matrix(n, shape.height * shape.width * shape.channels);
    const double cy = (static_cast<double>(shape.height) - 1.0) / 2.0;
    const double cx = (static_cast<double>(shape.width) - 1.0) / 2.0;
    const double radius = 0.3 * static_cast<double>(std::min(shape.height, shape.width));
    for (std::size_t i = 0; i < n; ++i) {
        const int label = static_cast<int>(rng.below(static_cast<std::uint64_t>(classes)));
        // An oriented bar whose angle encodes the class, plus a class-dependent blob offset.
        const double angle = std::numbers::pi * static_cast<double>(label) / static_cast<double>(classes);
        const double blob_dx = radius * std::cos(2.0 * angle);
        const double blob_dy = radius * std::sin(2.0 * angle);
        auto row = out.inputs.row(i);
        for (std::size_t y = 0; y < shape.height; ++y) {
            for (std::size_t x = 0; x < shape.width; ++x) {
                const double u = static_cast<double>(x) - cx;
                const double v = static_cast<double>(y) - cy;
                const double across = -u * std::sin(angle) + v * std::cos(angle);
                const double bar = std::exp(-across * across / 4.0) * std::exp(-(u * u + v * v) / (2.0 * radius * radius));
                const double bu = u - blob_dx;
                const double bv = v - blob_dy;
                const double blob = 0.5 * std::exp(-(bu * bu + bv * bv) / 8.0);
                for (std::size_t c = 0; c < shape.channels; ++c) {
                    const double noise = 0.05 * rng.normal();
                    row[(y * shape.width + x) * shape.channels + c] = std::clamp(bar + blob + noise, 0.0, 1.0);
                }
            }
        }
        out.labels.push_back(label);
    }
    out.meta = "synth_images";
    return out;
}

void write_dataset_csv(const std::filesystem::path& path, const LabeledDataset& data) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << "label,sub_env";
    for (std::size_t j = 0; j < data.inputs.cols(); ++j) out << ",x" << j;
    out << '\n';
    char buf[32];
    for (std::size_t i = 0; i < data.size(); ++i) {
        out << data.labels[i] << ',' << (data.sub_env.empty() ? -1 : data.sub_env[i]);
        for (double v : data.inputs.row(i)) {
            std::snprintf(buf, sizeof buf, "%.17g", v);
            out << ',' << buf;
        }
        out << '\n';
    }
    if (!out) throw std::runtime_error("write failed: " + path.string());
}

LabeledDataset read_dataset_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::string line;
    if (!std::getline(in, line)) throw SchemaError("dataset CSV: missing header");
    const auto header = split_csv_line(line);
    if (header.size() < 3 || header[0] != "label" || header[1] != "sub_env") throw SchemaError("dataset CSV: bad header");
    LabeledDataset out;
    bool any_env = false;
    std::vector<double> row(header.size() - 2);
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto cells = split_csv_line(line);
        if (cells.size() != header.size()) throw SchemaError("dataset CSV: ragged row");
        out.labels.push_back(static_cast<int>(parse_double(cells[0])));
        const int env = static_cast<int>(parse_double(cells[1]));
        out.sub_env.push_back(env);
        any_env = any_env || env >= 0;
        for (std::size_t j = 0; j < row.size(); ++j) row[j] = parse_double(cells[j + 2]);
        out.inputs.append_row(row);
    }
    if (out.labels.empty()) throw SchemaError("dataset CSV: no rows");
    if (!any_env) out.sub_env.clear();
    out.meta = path.filename().string();
    return out;
}

}  // namespace fedilc
