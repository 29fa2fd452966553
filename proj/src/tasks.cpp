#include "tasks.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>

#include "errors.hpp"

namespace memvit {

void SyntheticTaskSpec::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("data: " + m); };
  if (num_classes < 2) fail("num_classes must be at least 2");
  if (image_size == 0 || channels == 0) fail("image_size and channels must be positive");
  if (samples_per_class == 0) fail("samples_per_class must be positive");
  if (freq_min == 0 || freq_min > freq_max || 2 * freq_max >= image_size) {
    fail("frequencies must satisfy 1 <= freq_min <= freq_max < image_size / 2");
  }
  if (gratings_per_class == 0 || gratings_per_class > pool_size) fail("gratings_per_class must be in [1, pool_size]");
  if (!(noise_std >= 0)) fail("noise_std must be non-negative");
  if (!(overlap >= 0 && overlap <= 1)) fail("overlap must lie in [0, 1]");
  if (!(amplitude_jitter >= 0 && amplitude_jitter < 1)) fail("amplitude_jitter must lie in [0, 1)");
  if (!(test_fraction >= 0 && test_fraction < 1)) fail("test_fraction must lie in [0, 1)");
  if (!(holdout_fraction >= 0 && holdout_fraction < 1)) fail("holdout_fraction must lie in [0, 1)");
  // Canonical frequency pairs available: fx in [0, fmax], fy in [-fmax, fmax],
  // with max(|fx|, |fy|) >= fmin and (fx, fy) not the conjugate of another.
  std::size_t available = 0;
  const int fmax = int(freq_max), fmin = int(freq_min);
  for (int fx = 0; fx <= fmax; ++fx) {
    for (int fy = -fmax; fy <= fmax; ++fy) {
      if (std::max(fx, std::abs(fy)) >= fmin && (fx > 0 || fy > 0)) ++available;
    }
  }
  if (pool_size > available) fail("pool_size exceeds the " + std::to_string(available) + " available frequencies");
}

namespace {

// Uniform index in [0, n) straight from the engine, so the stream does not
// depend on the standard library's distribution implementations.
std::size_t draw_index(std::mt19937_64& rng, std::size_t n) { return static_cast<std::size_t>(rng() % n); }

double draw_unit(std::mt19937_64& rng) { return double(rng() >> 11) * 0x1.0p-53; }

double draw_normal(std::mt19937_64& rng) {
  // Box-Muller on two engine draws; 1 - u keeps the log argument positive.
  const double u = 1.0 - draw_unit(rng), v = draw_unit(rng);
  return std::sqrt(-2.0 * std::log(u)) * std::cos(2.0 * std::numbers::pi * v);
}

float quantize(double v) {
  const double c = std::clamp(v, 0.0, 1.0);
  return float(std::lround(c * 255.0)) / 255.0f;
}

double amplitude_scale(const SyntheticTaskSpec& spec) { return 0.4 / double(spec.gratings_per_class); }

}  // namespace

std::vector<Grating> texture_family(const SyntheticTaskSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.family_seed * 0x9E3779B97F4A7C15ull + 0x51);
  std::vector<std::pair<int, int>> freqs;
  const int fmax = int(spec.freq_max), fmin = int(spec.freq_min);
  for (int fx = 0; fx <= fmax; ++fx) {
    for (int fy = -fmax; fy <= fmax; ++fy) {
      if (std::max(fx, std::abs(fy)) >= fmin && (fx > 0 || fy > 0)) freqs.emplace_back(fx, fy);
    }
  }
  for (std::size_t i = freqs.size(); i > 1; --i) std::swap(freqs[i - 1], freqs[draw_index(rng, i)]);
  std::vector<Grating> pool;
  for (std::size_t g = 0; g < spec.pool_size; ++g) {
    Grating gr;
    gr.fx = freqs[g].first;
    gr.fy = freqs[g].second;
    for (std::size_t ch = 0; ch < spec.channels; ++ch) gr.color.push_back(0.2 + 0.8 * draw_unit(rng));
    pool.push_back(std::move(gr));
  }
  return pool;
}

std::vector<ClassSignature> class_signatures(const SyntheticTaskSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed * 0xD1B54A32D192ED03ull + spec.family_seed * 31 + 0x77);
  std::set<std::vector<std::size_t>> used;
  std::vector<ClassSignature> sigs;
  for (std::size_t k = 0; k < spec.num_classes; ++k) {
    std::vector<std::size_t> subset;
    for (int attempt = 0; attempt < 1000; ++attempt) {
      std::vector<std::size_t> idx(spec.pool_size);
      for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
      for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[draw_index(rng, i)]);
      subset.assign(idx.begin(), idx.begin() + std::ptrdiff_t(spec.gratings_per_class));
      std::sort(subset.begin(), subset.end());
      if (!used.count(subset)) break;
    }
    used.insert(subset);
    ClassSignature s;
    s.amplitude.assign(spec.pool_size, 0.0);
    for (std::size_t g : subset) s.amplitude[g] = 0.6 + 0.4 * draw_unit(rng);
    sigs.push_back(std::move(s));
  }
  std::vector<double> mean(spec.pool_size, 0.0);
  for (const auto& s : sigs) {
    for (std::size_t g = 0; g < spec.pool_size; ++g) mean[g] += s.amplitude[g] / double(spec.num_classes);
  }
  for (auto& s : sigs) {
    for (std::size_t g = 0; g < spec.pool_size; ++g) {
      s.amplitude[g] = (1.0 - spec.overlap) * s.amplitude[g] + spec.overlap * mean[g];
    }
  }
  return sigs;
}

Dataset generate(const SyntheticTaskSpec& spec) {
  const auto family = texture_family(spec);
  const auto sigs = class_signatures(spec);
  Dataset data;
  data.height = data.width = spec.image_size;
  data.channels = spec.channels;
  data.num_classes = spec.num_classes;
  const std::size_t n = spec.num_classes * spec.samples_per_class, s = spec.image_size, c = spec.channels;
  data.pixels.resize(n * s * s * c);
  data.labels.resize(n);
  std::mt19937_64 rng(spec.seed * 0x94D049BB133111EBull + spec.family_seed + 0x1234);
  const double scale = amplitude_scale(spec);
  const double two_pi = 2.0 * std::numbers::pi;
  std::vector<double> img(s * s * c);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t k = i % spec.num_classes;
    data.labels[i] = int(k);
    std::fill(img.begin(), img.end(), 0.5);
    for (std::size_t g = 0; g < family.size(); ++g) {
      const double phase = two_pi * draw_unit(rng);
      const double jitter = 1.0 + spec.amplitude_jitter * (2.0 * draw_unit(rng) - 1.0);
      const double a = sigs[k].amplitude[g] * jitter * scale;
      if (a == 0.0) continue;
      for (std::size_t y = 0; y < s; ++y) {
        for (std::size_t x = 0; x < s; ++x) {
          const double w = a * std::cos(two_pi * double(family[g].fx * int(x) + family[g].fy * int(y)) / double(s) + phase);
          for (std::size_t ch = 0; ch < c; ++ch) img[(y * s + x) * c + ch] += w * family[g].color[ch];
        }
      }
    }
    float* out = data.pixels.data() + i * s * s * c;
    for (std::size_t p = 0; p < img.size(); ++p) {
      const double noise = spec.noise_std > 0 ? spec.noise_std * draw_normal(rng) : 0.0;
      out[p] = quantize(img[p] + noise);
    }
  }
  assign_splits(data, spec.seed, spec.test_fraction, spec.holdout_fraction);
  return data;
}

void assign_splits(Dataset& data, std::uint64_t seed, double test_fraction, double holdout_fraction) {
  const std::size_t n = data.size();
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  std::mt19937_64 rng(seed * 0xBF58476D1CE4E5B9ull + 0xABCD);
  for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[draw_index(rng, i)]);
  const auto n_test = std::size_t(std::llround(test_fraction * double(n)));
  const std::size_t pool = n - n_test;
  const auto n_hold = std::size_t(std::llround(holdout_fraction * double(pool)));
  data.test.assign(idx.begin(), idx.begin() + std::ptrdiff_t(n_test));
  data.holdout.assign(idx.begin() + std::ptrdiff_t(n_test), idx.begin() + std::ptrdiff_t(n_test + n_hold));
  data.train.assign(idx.begin() + std::ptrdiff_t(n_test + n_hold), idx.end());
  for (auto* v : {&data.test, &data.holdout, &data.train}) std::sort(v->begin(), v->end());
}

template <typename T>
Tensor<T> Dataset::images(std::span<const std::size_t> indices) const {
  Tensor<T> out = Tensor<T>::zeros({indices.size(), height, width, channels});
  const std::size_t e = image_numel();
  T* dst = out.data().data();
  for (std::size_t b = 0; b < indices.size(); ++b) {
    if (indices[b] >= size()) throw IndexError("dataset index " + std::to_string(indices[b]) + " out of range");
    const float* src = pixels.data() + indices[b] * e;
    for (std::size_t i = 0; i < e; ++i) dst[b * e + i] = static_cast<T>(src[i]);
  }
  return out;
}

template Tensor<float> Dataset::images<float>(std::span<const std::size_t>) const;
template Tensor<double> Dataset::images<double>(std::span<const std::size_t>) const;

std::vector<int> Dataset::labels_of(std::span<const std::size_t> indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) {
    if (i >= size()) throw IndexError("dataset index " + std::to_string(i) + " out of range");
    out.push_back(labels[i]);
  }
  return out;
}

namespace {

void put_u16(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(std::uint8_t(v & 0xFF));
  out.push_back(std::uint8_t(v >> 8));
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(std::uint8_t(v >> (8 * i)));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}
  std::uint32_t u16(const char* what) {
    const std::uint8_t* p = take(2, what);
    return std::uint32_t(p[0]) | std::uint32_t(p[1]) << 8;
  }
  std::uint32_t u32(const char* what) {
    const std::uint8_t* p = take(4, what);
    return std::uint32_t(p[0]) | std::uint32_t(p[1]) << 8 | std::uint32_t(p[2]) << 16 | std::uint32_t(p[3]) << 24;
  }
  const std::uint8_t* take(std::size_t n, const char* what) {
    if (pos_ + n > bytes_.size()) {
      throw FormatError(std::string("truncated dataset: ") + what + " needs " + std::to_string(n) + " bytes at offset " +
                        std::to_string(pos_) + ", file has " + std::to_string(bytes_.size()));
    }
    const std::uint8_t* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::size_t pos() const { return pos_; }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_binary(const Dataset& data) {
  if (data.size() > 0xFFFFFFFFu || data.height > 0xFFFF || data.width > 0xFFFF || data.channels > 0xFFFF ||
      data.num_classes > 0xFFFF) {
    throw FormatError("dataset too large for the binary format");
  }
  std::vector<std::uint8_t> out = {'M', 'T', 'D', 'S'};
  put_u32(out, 1);
  put_u32(out, std::uint32_t(data.size()));
  put_u16(out, std::uint32_t(data.height));
  put_u16(out, std::uint32_t(data.width));
  put_u16(out, std::uint32_t(data.channels));
  put_u16(out, std::uint32_t(data.num_classes));
  const std::size_t e = data.image_numel();
  out.reserve(out.size() + data.size() * (2 + e));
  for (std::size_t i = 0; i < data.size(); ++i) {
    put_u16(out, std::uint32_t(data.labels[i]));
    const float* px = data.pixels.data() + i * e;
    for (std::size_t j = 0; j < e; ++j) out.push_back(std::uint8_t(std::lround(std::clamp(px[j], 0.0f, 1.0f) * 255.0f)));
  }
  return out;
}

Dataset decode_binary(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  const std::uint8_t* magic = r.take(4, "magic");
  if (std::string(reinterpret_cast<const char*>(magic), 4) != "MTDS") throw FormatError("bad dataset magic at offset 0");
  const std::uint32_t version = r.u32("version");
  if (version != 1) throw FormatError("unsupported dataset version " + std::to_string(version) + " at offset 4");
  Dataset d;
  const std::uint32_t n = r.u32("record count");
  d.height = r.u16("height");
  d.width = r.u16("width");
  d.channels = r.u16("channels");
  d.num_classes = r.u16("class count");
  const std::size_t e = d.image_numel();
  d.labels.resize(n);
  d.pixels.resize(std::size_t(n) * e);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t at = r.pos();
    const std::uint32_t label = r.u16("record label");
    if (label >= d.num_classes) {
      throw FormatError("label " + std::to_string(label) + " at offset " + std::to_string(at) + " is not below " +
                        std::to_string(d.num_classes) + " classes");
    }
    d.labels[i] = int(label);
    const std::uint8_t* px = r.take(e, "record pixels");
    for (std::size_t j = 0; j < e; ++j) d.pixels[i * e + j] = float(px[j]) / 255.0f;
  }
  if (r.pos() != bytes.size()) {
    throw FormatError("trailing bytes after " + std::to_string(n) + " records at offset " + std::to_string(r.pos()));
  }
  return d;
}

void save_binary(const Dataset& data, const std::filesystem::path& path) {
  const auto bytes = encode_binary(data);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  if (!f) throw IoError("failed writing " + path.string());
}

Dataset load_binary(const std::filesystem::path& path, std::uint64_t split_seed, double test_fraction,
                    double holdout_fraction) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  Dataset d = decode_binary(bytes);
  assign_splits(d, split_seed, test_fraction, holdout_fraction);
  return d;
}

int nearest_signature(std::span<const float> image, const SyntheticTaskSpec& spec, const std::vector<Grating>& family,
                      const std::vector<ClassSignature>& signatures) {
  const std::size_t s = spec.image_size, c = spec.channels;
  const double two_pi = 2.0 * std::numbers::pi;
  std::vector<double> mean(c, 0.0);
  for (std::size_t p = 0; p < s * s; ++p) {
    for (std::size_t ch = 0; ch < c; ++ch) mean[ch] += image[p * c + ch] / double(s * s);
  }
  std::vector<double> measured(family.size());
  for (std::size_t g = 0; g < family.size(); ++g) {
    double num = 0, den = 0;
    for (std::size_t ch = 0; ch < c; ++ch) {
      double re = 0, im = 0;
      for (std::size_t y = 0; y < s; ++y) {
        for (std::size_t x = 0; x < s; ++x) {
          const double ang = two_pi * double(family[g].fx * int(x) + family[g].fy * int(y)) / double(s);
          const double v = image[(y * s + x) * c + ch] - mean[ch];
          re += v * std::cos(ang);
          im -= v * std::sin(ang);
        }
      }
      const double amp = 2.0 * std::hypot(re, im) / double(s * s);
      num += amp * family[g].color[ch];
      den += family[g].color[ch] * family[g].color[ch];
    }
    measured[g] = num / den / amplitude_scale(spec);
  }
  int best = 0;
  double best_d = INFINITY;
  for (std::size_t k = 0; k < signatures.size(); ++k) {
    double d = 0;
    for (std::size_t g = 0; g < family.size(); ++g) d += std::pow(measured[g] - signatures[k].amplitude[g], 2);
    if (d < best_d) {
      best_d = d;
      best = int(k);
    }
  }
  return best;
}

template <typename T>
Tensor<T> flip_horizontal(const Tensor<T>& batch) {
  if (batch.rank() != 4) throw DimensionError("flip_horizontal: expected [B, h, w, c], got " + shape_str(batch.shape()));
  Tensor<T> out = batch.clone();
  const std::size_t b = batch.dim(0), h = batch.dim(1), w = batch.dim(2), c = batch.dim(3);
  const T* src = batch.data().data();
  T* dst = out.data().data();
  for (std::size_t i = 0; i < b * h; ++i) {
    for (std::size_t x = 0; x < w; ++x) std::copy_n(src + (i * w + x) * c, c, dst + (i * w + (w - 1 - x)) * c);
  }
  return out;
}

template <typename T>
Tensor<T> augment(const Tensor<T>& batch, bool flip, std::size_t crop_pad, std::mt19937_64& rng) {
  if (batch.rank() != 4) throw DimensionError("augment: expected [B, h, w, c], got " + shape_str(batch.shape()));
  const std::size_t b = batch.dim(0), h = batch.dim(1), w = batch.dim(2), c = batch.dim(3);
  Tensor<T> out = Tensor<T>::zeros(batch.shape());
  const T* src = batch.data().data();
  T* dst = out.data().data();
  for (std::size_t n = 0; n < b; ++n) {
    const bool mirror = flip && (rng() & 1);
    const long dy = crop_pad ? long(draw_index(rng, 2 * crop_pad + 1)) - long(crop_pad) : 0;
    const long dx = crop_pad ? long(draw_index(rng, 2 * crop_pad + 1)) - long(crop_pad) : 0;
    for (std::size_t y = 0; y < h; ++y) {
      const long sy = long(y) + dy;
      if (sy < 0 || sy >= long(h)) continue;
      for (std::size_t x = 0; x < w; ++x) {
        long sx = long(x) + dx;
        if (sx < 0 || sx >= long(w)) continue;
        if (mirror) sx = long(w) - 1 - sx;
        std::copy_n(src + ((n * h + std::size_t(sy)) * w + std::size_t(sx)) * c, c, dst + ((n * h + y) * w + x) * c);
      }
    }
  }
  return out;
}

template Tensor<float> flip_horizontal<float>(const Tensor<float>&);
template Tensor<double> flip_horizontal<double>(const Tensor<double>&);
template Tensor<float> augment<float>(const Tensor<float>&, bool, std::size_t, std::mt19937_64&);
template Tensor<double> augment<double>(const Tensor<double>&, bool, std::size_t, std::mt19937_64&);

}  // namespace memvit
