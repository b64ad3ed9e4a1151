#pragma once

// Non-i.i.d. silo construction and raw-format loaders.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "fedilc/matrix.hpp"
#include "fedilc/nn.hpp"

namespace fedilc {

struct LabeledDataset {
    Matrix inputs;
    std::vector<int> labels;
    std::string meta;
    std::vector<int> sub_env;                // optional, one tag per sample
    std::vector<std::size_t> source_index;  // optional, index into the generator's sample pool

    std::size_t size() const { return labels.size(); }
    bool empty() const { return labels.empty(); }
    void validate() const;
    Batch as_batch() const { return Batch{inputs, labels}; }
    LabeledDataset subset(std::span<const std::size_t> indices) const;
};

struct Silo {
    LabeledDataset train;
    LabeledDataset val;
};

struct FederationDataset {
    std::vector<Silo> silos;
    LabeledDataset ood_test;

    std::size_t feature_dim() const { return silos.front().train.inputs.cols(); }
    void validate() const;
};

class FormatError : public std::runtime_error {
public:
    FormatError(const std::string& what, std::size_t offset)
        : std::runtime_error(what + " (at byte " + std::to_string(offset) + ")"), offset_(offset) {}
    std::size_t offset() const noexcept { return offset_; }

private:
    std::size_t offset_;
};

class SchemaError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// ---- IDX (MNIST) -----------------------------------------------------------

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

struct IdxArray {
    std::uint32_t magic = 0;
    std::vector<std::uint32_t> dims;
    std::vector<std::uint8_t> data;
};

/// Parses a big-endian IDX buffer with unsigned-byte payload (magic 0x801 or 0x803).
IdxArray parse_idx(std::span<const std::uint8_t> bytes);
IdxArray load_idx(const std::filesystem::path& path);

/// n x (rows*cols) matrix of pixels scaled to [0,1].
Matrix idx_images(const IdxArray& idx);
std::vector<int> idx_labels(const IdxArray& idx);

/// Images and labels together; throws if counts differ.
LabeledDataset load_mnist(const std::filesystem::path& images, const std::filesystem::path& labels);

// ---- CIFAR-10 binary -------------------------------------------------------

inline constexpr std::size_t kCifarRecordBytes = 3073;

/// Reads 3073-byte records (label, 1024 R, 1024 G, 1024 B). Pixels are
/// returned interleaved height x width x channel and scaled to [0,1].
LabeledDataset parse_cifar(std::span<const std::uint8_t> bytes);
LabeledDataset load_cifar(std::span<const std::filesystem::path> paths);

// ---- Images ----------------------------------------------------------------

struct Image {
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t channels = 1;
    std::vector<double> pixels;  // height x width x channels

    double& at(std::size_t y, std::size_t x, std::size_t c) { return pixels[(y * width + x) * channels + c]; }
    double at(std::size_t y, std::size_t x, std::size_t c) const { return pixels[(y * width + x) * channels + c]; }
    friend bool operator==(const Image&, const Image&) = default;
};

/// Counter-clockwise (as displayed, y pointing down) rotation about the image
/// centre with bilinear sampling; samples outside the source read as 0.
Image rotate_image(const Image& img, double degrees);

/// Box-filter downscale by an integer factor in each direction.
Image downscale(const Image& img, std::size_t out_height, std::size_t out_width);

Image to_grayscale(const Image& img);

// ---- Generators ------------------------------------------------------------

struct ColorDigitsOptions {
    double val_fraction = 0.2;
    std::size_t side = 28;  // source images are side x side grayscale
    std::size_t downsample = 2;
};

/// Color-digits silos: binary label 1{digit >= 5}, a color bit equal to the
/// label flipped with each silo's probability, and a two-channel image (red
/// holds the digit when the color bit is 1, green otherwise). The base set is
/// shuffled and split evenly into the silos plus an OOD share, which also
/// flips labels before coloring.
FederationDataset make_color_digits(const LabeledDataset& base, std::span<const double> flip_probs,
                                    double ood_color_flip, double ood_label_flip, std::uint64_t seed,
                                    const ColorDigitsOptions& options = {});

struct ImageShape {
    std::size_t height;
    std::size_t width;
    std::size_t channels;
};

struct RotatedOptions {
    double val_fraction = 0.2;
    std::size_t out_side = 16;
};

/// Rotated-image silos: silo e splits its share of the base images evenly
/// across its angles (sub-environments, tagged 0..m-1); OOD images get a
/// per-image angle drawn uniformly from ood_range. Images are converted to
/// grayscale, rotated, box-downscaled to out_side^2 and flattened.
FederationDataset make_rotated_silos(const LabeledDataset& base, ImageShape shape,
                                     const std::vector<std::vector<double>>& silo_degrees,
                                     std::pair<double, double> ood_range, std::uint64_t seed,
                                     const RotatedOptions& options = {});

/// Per-silo Gaussian class-conditional features (mean -1/+1 per dimension,
/// unit variance) plus one spurious feature equal to the label flipped with
/// the silo's probability. Each silo has n_per_silo samples split 80/20
/// train/val; the OOD set has n_per_silo samples with ood_flip.
FederationDataset make_synth_spurious(std::size_t n_per_silo, std::size_t d_inv, std::span<const double> flip_probs,
                                      double ood_flip, std::uint64_t seed);

struct ClinicalOptions {
    std::size_t n_patients = 30760;
    double mean_active = 20.0;
    std::size_t training_hospitals = 20;
    double train_fraction = 0.7;
};

struct ClinicalData {
    FederationDataset data;
    std::vector<std::size_t> hospital_sizes;   // per generated hospital
    std::vector<std::size_t> silo_hospitals;   // hospital index of each training silo
    double pooled_positive_rate = 0.0;
};

/// Synthetic stand-in for a multi-hospital mortality task with sparse binary
/// features and a hospital-shifted logistic ground truth.
ClinicalData make_synth_clinical(std::size_t n_hospitals, std::size_t n_features, double positive_rate,
                                 std::uint64_t seed, const ClinicalOptions& options = {});

struct ClinicalCsv {
    FederationDataset data;
    std::vector<std::string> silo_hospitals;
};

/// CSV with header `hospital_id,label,<feature>...`; features must be 0/1.
/// The largest hospitals (up to training_hospitals) become silos in file
/// order split train/val, the remainder pool into the OOD set (possibly empty).
ClinicalCsv load_clinical_csv(const std::filesystem::path& path, const ClinicalOptions& options = {});
ClinicalCsv parse_clinical_csv(std::string_view text, const ClinicalOptions& options = {});

/// Class-dependent smooth synthetic images, a stand-in when no CIFAR files are available.
LabeledDataset make_synth_images(std::size_t n, ImageShape shape, int classes, std::uint64_t seed);

// ---- Silo files (wire-mode clients) ----------------------------------------

/// `label,sub_env,x0,x1,...` with 17 significant digits, exact round trip.
void write_dataset_csv(const std::filesystem::path& path, const LabeledDataset& data);
LabeledDataset read_dataset_csv(const std::filesystem::path& path);

}  // namespace fedilc
