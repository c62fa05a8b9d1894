#include "fedkappa/data/site.hpp"

#include <algorithm>
#include <charconv>
#include <limits>
#include <cmath>
#include <map>
#include <numeric>
#include <sstream>

#include "fedkappa/common/bytes.hpp"
#include "fedkappa/common/error.hpp"
#include "fedkappa/common/kv_config.hpp"

namespace fedkappa::data {

using nn::Tensor;

std::string_view to_string(Split split) {
  switch (split) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

void SiteProfile::validate() const {
  auto fail = [&](const std::string& why) {
    throw Error(ErrorCode::InvalidProfile, "site '" + site_id + "': " + why);
  };
  double mass = 0;
  for (double p : class_prior) {
    if (!std::isfinite(p) || p < 0) fail("class_prior entries must be finite and >= 0");
    mass += p;
  }
  if (mass <= 0 && n_train + n_val + n_test > 0) fail("class_prior has zero mass but counts are positive");
  if (std::abs(mass - 1.0) > 1e-9) fail("class_prior must sum to 1");
  if (n_train < 1) fail("n_train must be >= 1");
  if (!(intensity_mean > 0 && intensity_mean < 1)) fail("intensity_mean must lie in (0, 1)");
  if (!(intensity_std >= 0) || !std::isfinite(intensity_std)) fail("intensity_std must be >= 0");
  if (!(images_per_patient >= 1)) fail("images_per_patient must be >= 1");
  if (resolution < 1 || resolution > 0xFFFF) fail("resolution must be in [1, 65535]");
}

std::vector<std::size_t> SiteDataset::indices(Split split) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < splits.size(); ++i) {
    if (splits[i] == split) out.push_back(i);
  }
  return out;
}

std::size_t SiteDataset::count(Split split) const {
  return static_cast<std::size_t>(std::count(splits.begin(), splits.end(), split));
}

void SiteDataset::validate() const {
  const auto n = images.size();
  if (labels.size() != n || patient_ids.size() != n || splits.size() != n) {
    throw Error(ErrorCode::Malformed, "dataset arrays have different lengths");
  }
  const auto r = static_cast<std::size_t>(resolution);
  std::map<std::uint32_t, Split> patient_split;
  for (std::size_t i = 0; i < n; ++i) {
    if (images[i].shape() != std::vector<std::size_t>{r, r}) {
      throw Error(ErrorCode::InvalidShape, "image " + std::to_string(i) + " is not resolution x resolution");
    }
    if (labels[i] >= kNumClasses) throw Error(ErrorCode::InvalidLabel, "label " + std::to_string(labels[i]));
    auto [it, inserted] = patient_split.emplace(patient_ids[i], splits[i]);
    if (!inserted && it->second != splits[i]) {
      throw Error(ErrorCode::Malformed, "patient " + std::to_string(patient_ids[i]) + " spans two splits");
    }
  }
}

Tensor DensityRenderer::render(int label, int resolution, CounterRng& rng) const {
  if (label < 0 || label >= kNumClasses) throw Error(ErrorCode::InvalidLabel, "label " + std::to_string(label));
  const auto r = static_cast<std::size_t>(resolution);
  const double target = std::clamp(bright_fraction[static_cast<std::size_t>(label)] + fraction_jitter * rng.normal(),
                                   0.02, 0.98);

  struct Blob {
    double x, y, inv_two_sigma2, amp;
  };
  std::vector<Blob> field_blobs(static_cast<std::size_t>(blobs));
  for (auto& b : field_blobs) {
    b.x = rng.uniform(0.0, resolution);
    b.y = rng.uniform(0.0, resolution);
    const double sigma = texture_scale * resolution * rng.uniform(0.6, 1.6);
    b.inv_two_sigma2 = 1.0 / (2.0 * sigma * sigma);
    b.amp = rng.uniform(0.5, 1.0);
  }
  std::vector<double> field(r * r);
  for (std::size_t y = 0; y < r; ++y) {
    for (std::size_t x = 0; x < r; ++x) {
      double v = 0.05 * rng.normal();
      for (const auto& b : field_blobs) {
        const double dx = static_cast<double>(x) + 0.5 - b.x;
        const double dy = static_cast<double>(y) + 0.5 - b.y;
        v += b.amp * std::exp(-(dx * dx + dy * dy) * b.inv_two_sigma2);
      }
      field[y * r + x] = v;
    }
  }
  // The brightest `bright` pixels become dense tissue.
  const auto bright = static_cast<std::size_t>(std::lround(target * static_cast<double>(r * r)));
  std::vector<double> sorted = field;
  std::sort(sorted.begin(), sorted.end(), std::greater<>());
  const double threshold = bright == 0 ? std::numeric_limits<double>::infinity() : sorted[bright - 1];

  Tensor img({r, r});
  for (std::size_t i = 0; i < r * r; ++i) {
    const double base = field[i] >= threshold ? dense_level : fatty_level;
    img[i] = static_cast<float>(std::clamp(base + pixel_noise * rng.normal(), 0.0, 1.0));
  }
  return img;
}

Tensor apply_site_intensity(const Tensor& raw, double intensity_mean, double intensity_std) {
  Tensor out = raw;
  const double gain = intensity_std / 0.25;
  for (auto& v : out.values()) {
    v = static_cast<float>(std::clamp(intensity_mean + (static_cast<double>(v) - 0.5) * gain, 0.0, 1.0));
  }
  return out;
}

namespace {

int draw_label(const std::array<double, kNumClasses>& prior, CounterRng& rng) {
  const double u = rng.uniform();
  double cum = 0;
  int last_nonzero = 0;
  for (int c = 0; c < kNumClasses; ++c) {
    if (prior[static_cast<std::size_t>(c)] <= 0) continue;
    last_nonzero = c;
    cum += prior[static_cast<std::size_t>(c)];
    if (u < cum) return c;
  }
  return last_nonzero;
}

}  // namespace

SiteDataset generate_site(const SiteProfile& profile, const DensityRenderer& renderer) {
  profile.validate();
  SiteDataset ds;
  ds.site_id = profile.site_id;
  ds.resolution = profile.resolution;
  CounterRng patients(derive_seed(profile.seed, "patients"));
  const std::uint64_t render_key = derive_seed(profile.seed, "render");

  // Patient sizes are uniform on [1, 2m - 1] so the mean is m.
  const auto max_per_patient =
      std::max<std::uint64_t>(1, static_cast<std::uint64_t>(std::llround(2.0 * profile.images_per_patient - 1.0)));
  std::uint32_t next_patient = 1;
  const std::pair<Split, std::uint32_t> plan[] = {
      {Split::Train, profile.n_train}, {Split::Val, profile.n_val}, {Split::Test, profile.n_test}};
  for (const auto& [split, target] : plan) {
    std::uint32_t remaining = target;
    while (remaining > 0) {
      const auto k = static_cast<std::uint32_t>(
          std::min<std::uint64_t>(remaining, 1 + patients.below(max_per_patient)));
      const int label = draw_label(profile.class_prior, patients);
      for (std::uint32_t i = 0; i < k; ++i) {
        CounterRng image_rng(derive_seed(render_key, ds.images.size()));
        auto raw = renderer.render(label, profile.resolution, image_rng);
        ds.images.push_back(apply_site_intensity(raw, profile.intensity_mean, profile.intensity_std));
        ds.labels.push_back(static_cast<std::uint8_t>(label));
        ds.patient_ids.push_back(next_patient);
        ds.splits.push_back(split);
      }
      ++next_patient;
      remaining -= k;
    }
  }
  return ds;
}

std::uint32_t scaled_count(std::uint32_t n, std::uint32_t scale) {
  if (scale == 0) throw Error(ErrorCode::InvalidConfig, "scale must be >= 1");
  if (scale == 1) return n;
  const auto v = static_cast<std::uint32_t>(std::llround(static_cast<double>(n) / scale));
  return std::max<std::uint32_t>(40, v);
}

std::vector<SiteProfile> default_seven_site_profiles(std::uint32_t scale, std::uint64_t seed) {
  struct Row {
    std::uint32_t train, val, test;
    std::array<double, 4> prior;
    double mean, std;
  };
  // Sites 1-3 share an acquisition family (similar intensities); sites 4-7
  // form a second family. Site 7 has almost no class b.
  static const Row rows[7] = {
      {22933, 3366, 6534, {0.10, 0.40, 0.38, 0.12}, 0.455, 0.155},
      {8365, 1216, 2568, {0.14, 0.44, 0.33, 0.09}, 0.475, 0.145},
      {44115, 6336, 12676, {0.08, 0.38, 0.42, 0.12}, 0.44, 0.165},
      {7219, 1030, 2069, {0.12, 0.36, 0.39, 0.13}, 0.535, 0.135},
      {6023, 983, 1822, {0.20, 0.42, 0.30, 0.08}, 0.56, 0.15},
      {6874, 853, 1727, {0.06, 0.30, 0.46, 0.18}, 0.52, 0.14},
      {4021, 664, 1288, {0.30, 0.01, 0.49, 0.20}, 0.545, 0.175},
  };
  std::vector<SiteProfile> out;
  for (std::size_t i = 0; i < 7; ++i) {
    const auto& row = rows[i];
    SiteProfile p;
    p.site_id = "client" + std::to_string(i + 1);
    p.n_train = scaled_count(row.train, scale);
    p.n_val = scaled_count(row.val, scale);
    p.n_test = scaled_count(row.test, scale);
    p.class_prior = row.prior;
    p.intensity_mean = row.mean;
    p.intensity_std = row.std;
    p.images_per_patient = 4.0;
    p.resolution = 32;
    p.seed = derive_seed(seed, p.site_id);
    out.push_back(p);
  }
  return out;
}

std::vector<Split> split_by_patient(std::span<const std::uint32_t> patient_ids,
                                    const std::array<double, 3>& fractions, std::uint64_t seed) {
  double total_fraction = 0;
  for (double f : fractions) {
    if (!(f >= 0)) throw Error(ErrorCode::InvalidConfig, "split fractions must be >= 0");
    total_fraction += f;
  }
  if (std::abs(total_fraction - 1.0) > 1e-9) throw Error(ErrorCode::InvalidConfig, "split fractions must sum to 1");

  // Patients in first-appearance order with their image counts.
  std::map<std::uint32_t, std::size_t> sizes;
  std::vector<std::uint32_t> order;
  for (auto id : patient_ids) {
    if (sizes[id]++ == 0) order.push_back(id);
  }
  std::vector<std::size_t> active;
  for (std::size_t s = 0; s < 3; ++s) {
    if (fractions[s] > 0) active.push_back(s);
  }
  if (order.size() < active.size()) {
    throw Error(ErrorCode::TooFewPatients, std::to_string(order.size()) + " patients for " +
                                               std::to_string(active.size()) + " splits");
  }

  CounterRng rng(derive_seed(seed, "split_by_patient"));
  shuffle(std::span(order), rng);

  // Seed every active split with one patient, then give each following
  // patient to the split furthest below its target image count.
  const double total_images = static_cast<double>(patient_ids.size());
  std::array<double, 3> filled{0, 0, 0};
  std::map<std::uint32_t, Split> assignment;
  for (std::size_t i = 0; i < order.size(); ++i) {
    std::size_t pick = active[0];
    if (i < active.size()) {
      pick = active[i];
    } else {
      double best = -std::numeric_limits<double>::infinity();
      for (auto s : active) {
        const double deficit = fractions[s] * total_images - filled[s];
        if (deficit > best) {
          best = deficit;
          pick = s;
        }
      }
    }
    filled[pick] += static_cast<double>(sizes[order[i]]);
    assignment[order[i]] = static_cast<Split>(pick);
  }
  std::vector<Split> out;
  out.reserve(patient_ids.size());
  for (auto id : patient_ids) out.push_back(assignment[id]);
  return out;
}

Tensor resample_bilinear(const Tensor& image, std::size_t out_h, std::size_t out_w) {
  if (image.rank() != 2) throw Error(ErrorCode::InvalidShape, "expected a 2-D image");
  const auto in_h = image.dim(0);
  const auto in_w = image.dim(1);
  auto coord = [](std::size_t o, std::size_t in, std::size_t out, std::size_t& i0, std::size_t& i1, double& t) {
    double s = (static_cast<double>(o) + 0.5) * static_cast<double>(in) / static_cast<double>(out) - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(in - 1));
    i0 = static_cast<std::size_t>(std::floor(s));
    i1 = std::min(i0 + 1, in - 1);
    t = s - static_cast<double>(i0);
  };
  Tensor out({out_h, out_w});
  for (std::size_t y = 0; y < out_h; ++y) {
    std::size_t y0, y1;
    double ty;
    coord(y, in_h, out_h, y0, y1, ty);
    for (std::size_t x = 0; x < out_w; ++x) {
      std::size_t x0, x1;
      double tx;
      coord(x, in_w, out_w, x0, x1, tx);
      const double top = (1 - tx) * image.at(y0, x0) + tx * image.at(y0, x1);
      const double bottom = (1 - tx) * image.at(y1, x0) + tx * image.at(y1, x1);
      out.at(y, x) = static_cast<float>((1 - ty) * top + ty * bottom);
    }
  }
  return out;
}

Tensor preprocess(const Tensor& image, int resolution) {
  if (image.rank() != 2 || image.size() == 0) throw Error(ErrorCode::InvalidShape, "expected a non-empty 2-D image");
  if (resolution < 1) throw Error(ErrorCode::InvalidShape, "resolution must be >= 1");
  const auto [lo_it, hi_it] = std::minmax_element(image.values().begin(), image.values().end());
  const double lo = *lo_it;
  const double range = static_cast<double>(*hi_it) - lo;
  Tensor normalized = image;
  for (auto& v : normalized.values()) {
    v = range > 0 ? static_cast<float>((static_cast<double>(v) - lo) / range) : 0.0f;
  }
  const auto r = static_cast<std::size_t>(resolution);
  if (normalized.dim(0) == r && normalized.dim(1) == r) return normalized;
  return resample_bilinear(normalized, r, r);
}

namespace {
constexpr char kMagic[4] = {'F', 'K', 'D', 'S'};
}

std::vector<std::uint8_t> encode_dataset(const SiteDataset& dataset) {
  dataset.validate();
  ByteWriter w;
  w.raw(std::string_view(kMagic, 4));
  w.u16(kDatasetFormatVersion);
  w.u32(static_cast<std::uint32_t>(dataset.size()));
  w.u16(static_cast<std::uint16_t>(dataset.resolution));
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    w.u32(dataset.patient_ids[i]);
    w.u8(dataset.labels[i]);
    w.u8(static_cast<std::uint8_t>(dataset.splits[i]));
    w.f32s(dataset.images[i].data());
  }
  return w.take();
}

SiteDataset decode_dataset(std::span<const std::uint8_t> bytes, std::string site_id) {
  ByteReader r(bytes);
  auto magic = r.bytes(4);
  if (!std::equal(magic.begin(), magic.end(), kMagic)) throw Error(ErrorCode::BadMagic, "not a dataset (expected FKDS)");
  const auto version = r.u16();
  if (version != kDatasetFormatVersion) {
    throw Error(ErrorCode::VersionMismatch, "dataset format version " + std::to_string(version));
  }
  const auto count = r.u32();
  const auto res = r.u16();
  if (res == 0) throw Error(ErrorCode::InvalidShape, "dataset resolution is zero");
  const std::size_t pixels = static_cast<std::size_t>(res) * res;
  if (count > r.remaining() / (6 + 4 * pixels)) {
    throw Error(ErrorCode::Truncated, "dataset declares " + std::to_string(count) + " images but is too short");
  }
  SiteDataset ds;
  ds.site_id = std::move(site_id);
  ds.resolution = res;
  for (std::uint32_t i = 0; i < count; ++i) {
    ds.patient_ids.push_back(r.u32());
    const auto label = r.u8();
    if (label >= kNumClasses) {
      throw Error(ErrorCode::InvalidLabel, "image " + std::to_string(i) + " has label " + std::to_string(label));
    }
    ds.labels.push_back(label);
    const auto split = r.u8();
    if (split > 2) throw Error(ErrorCode::Malformed, "image " + std::to_string(i) + " has split " + std::to_string(split));
    ds.splits.push_back(static_cast<Split>(split));
    Tensor img({res, res});
    r.f32s(img.data());
    ds.images.push_back(std::move(img));
  }
  if (r.remaining() != 0) throw Error(ErrorCode::Malformed, "trailing bytes after dataset");
  ds.validate();
  return ds;
}

void save_dataset(const std::filesystem::path& path, const SiteDataset& dataset) {
  write_file(path, encode_dataset(dataset));
}

SiteDataset load_dataset(const std::filesystem::path& path) {
  return decode_dataset(read_file(path), path.stem().string());
}

std::vector<SiteProfile> parse_profiles(std::string_view text) {
  const auto cfg = KvConfig::parse(text);
  const auto ids = cfg.get_list("sites");
  if (ids.empty()) throw Error(ErrorCode::InvalidProfile, "profile file lists no sites");
  std::vector<SiteProfile> out;
  for (const auto& id : ids) {
    const std::string k = "site." + id + ".";
    SiteProfile p;
    p.site_id = id;
    auto count = [&](const std::string& field) {
      const auto v = cfg.get_int(k + field, -1);
      if (v < 0 || v > 0xFFFFFFFFll) throw Error(ErrorCode::InvalidProfile, "missing or bad " + k + field);
      return static_cast<std::uint32_t>(v);
    };
    p.n_train = count("n_train");
    p.n_val = count("n_val");
    p.n_test = count("n_test");
    const auto prior = cfg.get_list(k + "class_prior");
    if (prior.size() != kNumClasses) throw Error(ErrorCode::InvalidProfile, k + "class_prior needs 4 values");
    for (std::size_t c = 0; c < kNumClasses; ++c) {
      const auto& text = prior[c];
      auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), p.class_prior[c]);
      if (ec != std::errc{} || end != text.data() + text.size()) {
        throw Error(ErrorCode::InvalidProfile, k + "class_prior has a non-numeric entry '" + text + "'");
      }
    }
    p.intensity_mean = cfg.get_double(k + "intensity_mean", p.intensity_mean);
    p.intensity_std = cfg.get_double(k + "intensity_std", p.intensity_std);
    p.images_per_patient = cfg.get_double(k + "images_per_patient", p.images_per_patient);
    p.resolution = static_cast<int>(cfg.get_int(k + "resolution", p.resolution));
    p.seed = cfg.get_u64(k + "seed", derive_seed(2021, id));
    p.validate();
    out.push_back(p);
  }
  return out;
}

std::string profiles_to_text(const std::vector<SiteProfile>& profiles) {
  std::ostringstream os;
  os << "sites = ";
  for (std::size_t i = 0; i < profiles.size(); ++i) os << (i ? "," : "") << profiles[i].site_id;
  os << '\n';
  for (const auto& p : profiles) {
    const std::string k = "site." + p.site_id + ".";
    os << k << "n_train = " << p.n_train << '\n';
    os << k << "n_val = " << p.n_val << '\n';
    os << k << "n_test = " << p.n_test << '\n';
    os << k << "class_prior = ";
    for (std::size_t c = 0; c < kNumClasses; ++c) os << (c ? "," : "") << format_double(p.class_prior[c]);
    os << '\n';
    os << k << "intensity_mean = " << format_double(p.intensity_mean) << '\n';
    os << k << "intensity_std = " << format_double(p.intensity_std) << '\n';
    os << k << "images_per_patient = " << format_double(p.images_per_patient) << '\n';
    os << k << "resolution = " << p.resolution << '\n';
    os << k << "seed = " << p.seed << '\n';
  }
  return os.str();
}

}  // namespace fedkappa::data
