// SPDX-License-Identifier: Apache-2.0

#include "mxdecomp/tensorstore.hpp"

#include "json.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>
#include <system_error>
#include <vector>

#include "mxdecomp/random.hpp"

namespace mxdecomp {

using nlohmann::json;

std::string_view dtype_name(DType d) {
  switch (d) {
    case DType::F64: return "F64";
    case DType::F32: return "F32";
    case DType::F16: return "F16";
    case DType::BF16: return "BF16";
  }
  return "F64";
}

std::size_t dtype_size(DType d) {
  switch (d) {
    case DType::F64: return 8;
    case DType::F32: return 4;
    case DType::F16:
    case DType::BF16: return 2;
  }
  return 8;
}

DType parse_dtype(std::string_view name) {
  if (name == "F64") return DType::F64;
  if (name == "F32") return DType::F32;
  if (name == "F16") return DType::F16;
  if (name == "BF16") return DType::BF16;
  throw FormatError("unknown dtype '" + std::string(name) + "'");
}

void TensorSet::add(std::string name, Tensor t, DType dtype) {
  entries[std::move(name)] = TensorEntry{dtype, std::move(t)};
}

// ---------------------------------------------------------------------------
// Half-precision conversions

double half_to_double(std::uint16_t bits) {
  const bool neg = (bits & 0x8000U) != 0;
  const int exp = (bits >> 10) & 0x1f;
  const int man = bits & 0x3ff;
  double v;
  if (exp == 0) {
    v = std::ldexp(static_cast<double>(man), -24);
  } else if (exp == 31) {
    v = man == 0 ? std::numeric_limits<double>::infinity() : std::numeric_limits<double>::quiet_NaN();
  } else {
    v = std::ldexp(static_cast<double>(man + 1024), exp - 25);
  }
  return neg ? -v : v;
}

double bfloat16_to_double(std::uint16_t bits) {
  const std::uint32_t wide = static_cast<std::uint32_t>(bits) << 16;
  return static_cast<double>(std::bit_cast<float>(wide));
}

namespace {

// Round-to-nearest-even encoding into a binary format with `exp_bits`
// exponent bits and `man_bits` stored mantissa bits.
std::uint16_t encode_small_float(double v, int exp_bits, int man_bits) {
  const std::uint16_t sign = std::signbit(v) ? static_cast<std::uint16_t>(1U << (exp_bits + man_bits)) : 0;
  const std::uint16_t exp_all = static_cast<std::uint16_t>(((1U << exp_bits) - 1) << man_bits);
  if (std::isnan(v)) return static_cast<std::uint16_t>(exp_all | (1U << (man_bits - 1)));
  const int bias = (1 << (exp_bits - 1)) - 1;
  const int max_exp = bias;
  const int min_exp = 1 - bias;
  const double a = std::fabs(v);
  if (std::isinf(a)) return static_cast<std::uint16_t>(sign | exp_all);
  if (a < std::ldexp(1.0, min_exp)) {
    const double m = std::nearbyint(std::ldexp(a, man_bits - min_exp));
    return static_cast<std::uint16_t>(sign | static_cast<std::uint16_t>(m));
  }
  int k = 0;
  std::frexp(a, &k);
  int e = k - 1;
  double m = std::nearbyint(std::ldexp(a, man_bits - e));
  if (m == std::ldexp(1.0, man_bits + 1)) {
    m = std::ldexp(1.0, man_bits);
    ++e;
  }
  if (e > max_exp) return static_cast<std::uint16_t>(sign | exp_all);
  const auto stored = static_cast<std::uint32_t>(m) - (1U << man_bits);
  return static_cast<std::uint16_t>(sign | (static_cast<std::uint32_t>(e + bias) << man_bits) | stored);
}

void put_le(std::string& out, std::uint64_t v, std::size_t bytes) {
  for (std::size_t i = 0; i < bytes; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_le(const unsigned char* p, std::size_t bytes) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

double decode_value(const unsigned char* p, DType d) {
  switch (d) {
    case DType::F64: return std::bit_cast<double>(get_le(p, 8));
    case DType::F32: return static_cast<double>(std::bit_cast<float>(static_cast<std::uint32_t>(get_le(p, 4))));
    case DType::F16: return half_to_double(static_cast<std::uint16_t>(get_le(p, 2)));
    case DType::BF16: return bfloat16_to_double(static_cast<std::uint16_t>(get_le(p, 2)));
  }
  return 0.0;
}

void encode_value(std::string& out, double v, DType d) {
  switch (d) {
    case DType::F64: put_le(out, std::bit_cast<std::uint64_t>(v), 8); break;
    case DType::F32: put_le(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)), 4); break;
    case DType::F16: put_le(out, double_to_half(v), 2); break;
    case DType::BF16: put_le(out, double_to_bfloat16(v), 2); break;
  }
}

std::size_t checked_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) {
    if (d != 0 && n > std::numeric_limits<std::size_t>::max() / d) throw FormatError("shape overflows");
    n *= d;
  }
  return n;
}

}  // namespace

std::uint16_t double_to_half(double v) { return encode_small_float(v, 5, 10); }
std::uint16_t double_to_bfloat16(double v) { return encode_small_float(v, 8, 7); }

// ---------------------------------------------------------------------------
// Container codec

TensorSet parse_container(std::string_view bytes) {
  if (bytes.size() < 8) throw FormatError("malformed header: file shorter than the length prefix");
  const auto* base = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::uint64_t header_len = get_le(base, 8);
  if (header_len > bytes.size() - 8) throw FormatError("malformed header: header length exceeds file size");
  const std::string_view header_text = bytes.substr(8, static_cast<std::size_t>(header_len));
  const std::size_t data_begin = 8 + static_cast<std::size_t>(header_len);
  const std::size_t data_size = bytes.size() - data_begin;

  json header;
  try {
    header = json::parse(header_text);
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("malformed header: ") + e.what());
  }
  if (!header.is_object()) throw FormatError("malformed header: expected a JSON object");

  struct Pending {
    std::string name;
    DType dtype;
    Shape shape;
    std::size_t begin;
    std::size_t end;
  };
  std::vector<Pending> pending;
  for (const auto& [name, info] : header.items()) {
    if (name == "__metadata__") continue;
    if (!info.is_object() || !info.contains("dtype") || !info.contains("shape") ||
        !info.contains("data_offsets")) {
      throw FormatError("malformed header: entry '" + name + "' needs dtype, shape and data_offsets");
    }
    const auto& jd = info.at("dtype");
    const auto& js = info.at("shape");
    const auto& jo = info.at("data_offsets");
    if (!jd.is_string()) throw FormatError("malformed header: dtype of '" + name + "' is not a string");
    if (!js.is_array()) throw FormatError("malformed header: shape of '" + name + "' is not an array");
    if (!jo.is_array() || jo.size() != 2) {
      throw FormatError("malformed header: data_offsets of '" + name + "' must have two entries");
    }
    Pending p{name, parse_dtype(jd.get<std::string>()), {}, 0, 0};
    for (const auto& d : js) {
      if (!d.is_number_unsigned()) throw FormatError("malformed header: bad dimension in '" + name + "'");
      p.shape.push_back(d.get<std::size_t>());
    }
    if (!jo[0].is_number_unsigned() || !jo[1].is_number_unsigned()) {
      throw FormatError("malformed header: bad data_offsets in '" + name + "'");
    }
    p.begin = jo[0].get<std::size_t>();
    p.end = jo[1].get<std::size_t>();
    if (p.begin > p.end || p.end > data_size) {
      throw FormatError("out-of-bounds data_offsets for tensor '" + name + "'");
    }
    const std::size_t numel = checked_numel(p.shape);
    if (numel > std::numeric_limits<std::size_t>::max() / dtype_size(p.dtype) ||
        numel * dtype_size(p.dtype) != p.end - p.begin) {
      throw FormatError("byte size mismatch for tensor '" + name + "'");
    }
    pending.push_back(std::move(p));
  }

  std::vector<const Pending*> order;
  for (const auto& p : pending) {
    if (p.end > p.begin) order.push_back(&p);
  }
  std::sort(order.begin(), order.end(), [](const Pending* a, const Pending* b) { return a->begin < b->begin; });
  for (std::size_t i = 1; i < order.size(); ++i) {
    if (order[i]->begin < order[i - 1]->end) {
      throw FormatError("overlapping data_offsets between '" + order[i - 1]->name + "' and '" + order[i]->name +
                        "'");
    }
  }

  TensorSet set;
  const unsigned char* data = base + data_begin;
  for (auto& p : pending) {
    const std::size_t n = checked_numel(p.shape);
    const std::size_t width = dtype_size(p.dtype);
    std::vector<double> values(n);
    for (std::size_t i = 0; i < n; ++i) {
      values[i] = decode_value(data + p.begin + i * width, p.dtype);
      if (!std::isfinite(values[i])) throw FormatError("non-finite value in tensor '" + p.name + "'");
    }
    set.add(p.name, Tensor(std::move(p.shape), std::move(values)), p.dtype);
  }
  return set;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw std::runtime_error("error reading '" + path.string() + "'");
  return ss.str();
}

TensorSet load_container(const std::filesystem::path& path) { return parse_container(read_file(path)); }

std::string serialize_container(const TensorSet& set) {
  json header = json::object();
  std::string payload;
  for (const auto& [name, entry] : set.entries) {
    if (name == "__metadata__") throw FormatError("'__metadata__' is reserved");
    const std::size_t begin = payload.size();
    for (double v : entry.tensor.data) {
      if (!std::isfinite(v)) throw FormatError("non-finite value in tensor '" + name + "'");
      encode_value(payload, v, entry.dtype);
    }
    header[name] = {{"dtype", dtype_name(entry.dtype)},
                    {"shape", entry.tensor.shape},
                    {"data_offsets", {begin, payload.size()}}};
  }
  std::string text = header.dump();
  while (text.size() % 8 != 0) text.push_back(' ');
  std::string out;
  out.reserve(8 + text.size() + payload.size());
  put_le(out, text.size(), 8);
  out += text;
  out += payload;
  return out;
}

void write_file_atomic(const std::filesystem::path& path, std::string_view contents) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write '" + tmp.string() + "'");
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    out.flush();
    if (!out) throw std::runtime_error("error writing '" + tmp.string() + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp);
    throw std::runtime_error("cannot replace '" + path.string() + "': " + ec.message());
  }
}

void save_container(const TensorSet& set, const std::filesystem::path& path) {
  write_file_atomic(path, serialize_container(set));
}

// ---------------------------------------------------------------------------
// Synthetic tensors

std::string_view distribution_name(Distribution d) {
  switch (d) {
    case Distribution::gaussian: return "gaussian";
    case Distribution::laplace: return "laplace";
    case Distribution::student_t: return "student_t";
    case Distribution::lognormal_max_blocks: return "lognormal_max_blocks";
  }
  return "gaussian";
}

Distribution parse_distribution(std::string_view name) {
  for (auto d : {Distribution::gaussian, Distribution::laplace, Distribution::student_t,
                 Distribution::lognormal_max_blocks}) {
    if (name == distribution_name(d)) return d;
  }
  throw std::invalid_argument("unknown distribution '" + std::string(name) + "'");
}

void SynthSpec::validate() const {
  if (shape.empty() || shape_numel(shape) == 0) throw std::invalid_argument("synthetic shape must be non-empty");
  if (count == 0) throw std::invalid_argument("synthetic tensor count must be positive");
  if (!(nu > 4.0) || !std::isfinite(nu)) throw std::invalid_argument("student_t requires nu > 4");
  if (!(log_sigma >= 0.0) || !std::isfinite(log_sigma)) {
    throw std::invalid_argument("log_sigma must be finite and non-negative");
  }
  if (block == 0) throw std::invalid_argument("synthetic block length must be positive");
  if (prefix.empty()) throw std::invalid_argument("synthetic prefix must be non-empty");
}

TensorSet synth(const SynthSpec& spec) {
  spec.validate();
  const std::size_t width = std::to_string(spec.count - 1).size();
  TensorSet set;
  for (std::size_t t = 0; t < spec.count; ++t) {
    Rng rng(spec.seed, t);
    Tensor x = Tensor::zeros(spec.shape);
    switch (spec.distribution) {
      case Distribution::gaussian:
        for (double& v : x.data) v = rng.normal();
        break;
      case Distribution::laplace:
        for (double& v : x.data) v = rng.laplace();
        break;
      case Distribution::student_t:
        for (double& v : x.data) v = rng.student_t(spec.nu);
        break;
      case Distribution::lognormal_max_blocks:
        for (const auto& r : block_ranges(spec.shape, spec.block)) {
          const double factor = std::exp(spec.log_sigma * rng.normal());
          for (std::size_t i = 0; i < r.length; ++i) x.data[r.offset + i] = factor * rng.normal();
        }
        break;
    }
    std::string index = std::to_string(t);
    index.insert(0, width - index.size(), '0');
    set.add(spec.prefix + "." + index, std::move(x));
  }
  return set;
}

namespace {

template <typename T>
T parse_number(std::string_view text, std::string_view what) {
  T value{};
  const char* end = text.data() + text.size();
  std::from_chars_result res;
  if constexpr (std::is_floating_point_v<T>) {
    res = std::from_chars(text.data(), end, value, std::chars_format::general);
  } else {
    res = std::from_chars(text.data(), end, value);
  }
  if (text.empty() || res.ec != std::errc() || res.ptr != end) {
    throw std::invalid_argument("invalid " + std::string(what) + " '" + std::string(text) + "'");
  }
  return value;
}

void apply_option(SynthSpec& spec, std::string_view key, std::string_view value) {
  if (key == "nu") {
    spec.nu = parse_number<double>(value, "nu");
  } else if (key == "log_sigma") {
    spec.log_sigma = parse_number<double>(value, "log_sigma");
  } else if (key == "block") {
    spec.block = parse_number<std::size_t>(value, "block");
  } else if (key == "prefix") {
    spec.prefix = std::string(value);
  } else if (key == "count") {
    spec.count = parse_number<std::size_t>(value, "count");
  } else {
    throw std::invalid_argument("unknown synthetic option '" + std::string(key) + "'");
  }
}

SynthSpec parse_json_spec(std::string_view text, std::uint64_t seed) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument(std::string("invalid synthetic spec JSON: ") + e.what());
  }
  if (!j.is_object()) throw std::invalid_argument("synthetic spec JSON must be an object");
  SynthSpec spec;
  spec.seed = seed;
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "distribution") {
        spec.distribution = parse_distribution(value.get<std::string>());
      } else if (key == "shape") {
        spec.shape = value.get<Shape>();
      } else if (key == "seed") {
        spec.seed = value.get<std::uint64_t>();
      } else if (key == "count") {
        spec.count = value.get<std::size_t>();
      } else if (key == "nu") {
        spec.nu = value.get<double>();
      } else if (key == "log_sigma") {
        spec.log_sigma = value.get<double>();
      } else if (key == "block") {
        spec.block = value.get<std::size_t>();
      } else if (key == "prefix") {
        spec.prefix = value.get<std::string>();
      } else {
        throw std::invalid_argument("unknown synthetic option '" + key + "'");
      }
    }
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("invalid synthetic spec JSON: ") + e.what());
  }
  spec.validate();
  return spec;
}

}  // namespace

SynthSpec parse_synth_spec(std::string_view text, std::uint64_t seed) {
  const auto first = text.find_first_not_of(" \t\n");
  if (first != std::string_view::npos && text[first] == '{') return parse_json_spec(text, seed);

  SynthSpec spec;
  spec.seed = seed;
  const auto colon = text.find(':');
  if (colon == std::string_view::npos) {
    throw std::invalid_argument("synthetic spec must look like 'gaussian:256x256@64'");
  }
  std::string_view head = text.substr(0, colon);
  std::string_view tail = text.substr(colon + 1);

  std::size_t comma = head.find(',');
  spec.distribution = parse_distribution(head.substr(0, comma));
  while (comma != std::string_view::npos) {
    head = head.substr(comma + 1);
    comma = head.find(',');
    const std::string_view item = head.substr(0, comma);
    const auto eq = item.find('=');
    if (eq == std::string_view::npos) throw std::invalid_argument("synthetic option must be key=value");
    apply_option(spec, item.substr(0, eq), item.substr(eq + 1));
  }

  const auto at = tail.find('@');
  if (at != std::string_view::npos) {
    spec.count = parse_number<std::size_t>(tail.substr(at + 1), "count");
    tail = tail.substr(0, at);
  }
  spec.shape.clear();
  while (true) {
    const auto x = tail.find('x');
    spec.shape.push_back(parse_number<std::size_t>(tail.substr(0, x), "dimension"));
    if (x == std::string_view::npos) break;
    tail = tail.substr(x + 1);
  }
  spec.validate();
  return spec;
}

}  // namespace mxdecomp
