#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "fedkappa/common/rng.hpp"
#include "fedkappa/nn/tensor.hpp"

namespace fedkappa::data {

inline constexpr int kNumClasses = 4;

enum class Split : std::uint8_t { Train = 0, Val = 1, Test = 2 };

std::string_view to_string(Split split);

struct SiteProfile {
  std::string site_id;
  std::uint32_t n_train = 0;
  std::uint32_t n_val = 0;
  std::uint32_t n_test = 0;
  std::array<double, kNumClasses> class_prior{0.25, 0.25, 0.25, 0.25};
  double intensity_mean = 0.5;
  double intensity_std = 0.15;
  double images_per_patient = 4.0;
  int resolution = 32;
  std::uint64_t seed = 0;

  /// Throws Error{InvalidProfile} on any violated invariant.
  void validate() const;
  bool operator==(const SiteProfile&) const = default;
};

/// One client's images. Parallel arrays indexed by image; each image is a
/// [resolution, resolution] tensor with pixels in [0, 1].
struct SiteDataset {
  std::string site_id;
  int resolution = 0;
  std::vector<nn::Tensor> images;
  std::vector<std::uint8_t> labels;
  std::vector<std::uint32_t> patient_ids;
  std::vector<Split> splits;

  std::size_t size() const noexcept { return images.size(); }
  std::vector<std::size_t> indices(Split split) const;
  std::size_t count(Split split) const;

  /// Throws on broken invariants (InvalidShape / InvalidLabel / Malformed).
  void validate() const;
  bool operator==(const SiteDataset&) const = default;
};

/// Renders ordinal "density" images: a smooth random blob field thresholded
/// so that a target fraction of pixels is bright tissue. The target fraction
/// grows with the class index, which keeps labels ordinal and learnable.
struct DensityRenderer {
  std::array<double, kNumClasses> bright_fraction{0.10, 0.35, 0.60, 0.85};
  double fraction_jitter = 0.12;  ///< stddev of the per-image fraction
  double texture_scale = 0.12;    ///< blob sigma, as a fraction of the side
  int blobs = 10;
  double fatty_level = 0.25;
  double dense_level = 0.75;
  double pixel_noise = 0.04;

  /// Raw image in [0, 1]; population mean 0.5 at bright fraction 0.5.
  nn::Tensor render(int label, int resolution, CounterRng& rng) const;
};

/// Maps a raw rendered image to a site's intensity statistics:
///   out = clamp(mean + (raw - 0.5) * std / 0.25, 0, 1)
nn::Tensor apply_site_intensity(const nn::Tensor& raw, double intensity_mean, double intensity_std);

/// Builds a dataset with exactly n_train / n_val / n_test images. Patients
/// are created split by split; each patient carries one label drawn from
/// class_prior and a random number of images with the profile's mean.
SiteDataset generate_site(const SiteProfile& profile, const DensityRenderer& renderer = {});

/// Seven heterogeneous sites mirroring a real seven-institution study:
/// training/validation/test sizes are the published per-site counts divided
/// by `scale` (rounded, at least 40), class priors differ per site (the
/// seventh has almost no class-b mass), and intensity statistics differ.
std::vector<SiteProfile> default_seven_site_profiles(std::uint32_t scale, std::uint64_t seed = 2021);

/// round(n / scale) with a floor of 40; scale == 1 leaves n unchanged.
std::uint32_t scaled_count(std::uint32_t n, std::uint32_t scale);

/// Assigns whole patients to train/val/test so that image-count fractions
/// approach `fractions`. Returns one Split per image.
std::vector<Split> split_by_patient(std::span<const std::uint32_t> patient_ids,
                                    const std::array<double, 3>& fractions, std::uint64_t seed);

/// Min-max normalize to [0, 1] (constant images become all zero), then
/// bilinear-resample to resolution x resolution.
nn::Tensor preprocess(const nn::Tensor& image, int resolution);

/// Bilinear resampling with half-pixel centers and edge clamping.
nn::Tensor resample_bilinear(const nn::Tensor& image, std::size_t out_h, std::size_t out_w);

// FKDS layout (little-endian):
//   "FKDS" | u16 version=1 | u32 count | u16 resolution |
//   count x ( u32 patient_id | u8 label | u8 split | res*res f32 )
inline constexpr std::uint16_t kDatasetFormatVersion = 1;

std::vector<std::uint8_t> encode_dataset(const SiteDataset& dataset);
SiteDataset decode_dataset(std::span<const std::uint8_t> bytes, std::string site_id = {});
void save_dataset(const std::filesystem::path& path, const SiteDataset& dataset);
/// The site id is taken from the file stem.
SiteDataset load_dataset(const std::filesystem::path& path);

/// Profile files use the key-value grammar:
///   sites = client1,client2
///   site.client1.n_train = 22933
///   site.client1.class_prior = 0.1,0.4,0.38,0.12
///   ... n_val, n_test, intensity_mean, intensity_std, images_per_patient,
///       resolution, seed
std::vector<SiteProfile> parse_profiles(std::string_view text);
std::string profiles_to_text(const std::vector<SiteProfile>& profiles);

}  // namespace fedkappa::data
