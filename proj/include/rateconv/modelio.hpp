#pragma once

// On-disk formats: tensor blobs, model directories, frame sets, episode
// traces, normalization statistics, diagnostics and CSV reports. Byte
// layouts are documented in docs/formats.md.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "rateconv/error.hpp"
#include "rateconv/netcore.hpp"
#include "rateconv/normalize.hpp"
#include "rateconv/snnsim.hpp"
#include "rateconv/tensor.hpp"

namespace rateconv {

namespace fs = std::filesystem;
using Json = nlohmann::json;

inline constexpr std::string_view kBlobMagic = "SNNT0001";
inline constexpr std::string_view kTraceMagic = "SNNR0001";
inline constexpr int kFormatVersion = 1;
inline constexpr const char* kManifestName = "model.json";

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

/// Little-endian cursor over a byte buffer; every read is bounds-checked.
class Reader {
 public:
  Reader(std::string_view bytes, std::string context)
      : bytes_(bytes), context_(std::move(context)) {}

  std::size_t offset() const noexcept { return pos_; }
  std::size_t remaining() const noexcept { return bytes_.size() - pos_; }

  std::string_view take(std::size_t n, const char* what) {
    if (remaining() < n)
      throw FormatError(context_, std::string("truncated while reading ") + what);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::uint32_t u32(const char* what) {
    auto s = take(4, what);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(s[i]);
    return v;
  }
  std::uint64_t u64(const char* what) {
    auto s = take(8, what);
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(s[i]);
    return v;
  }

 private:
  std::string_view bytes_;
  std::string context_;
  std::size_t pos_ = 0;
};

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path.string() + ": cannot open file");
  std::ostringstream ss;
  ss << in.rdbuf();
  return std::move(ss).str();
}

inline void write_file(const fs::path& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(path.string() + ": cannot open file for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError(path.string() + ": write failed");
}

inline Tensor decode_blob_at(Reader& rd, const std::string& context) {
  if (rd.take(kBlobMagic.size(), "magic") != kBlobMagic)
    throw FormatError(context, "bad magic, expected SNNT0001");
  const std::uint32_t ndim = rd.u32("ndim");
  if (ndim > 16) throw FormatError(context, "implausible rank " + std::to_string(ndim));
  Shape shape(ndim);
  std::uint64_t count = 1;
  for (auto& d : shape) {
    d = rd.u32("dims");
    count *= d;
    if (count > (std::uint64_t{1} << 34))
      throw FormatError(context, "tensor too large");
  }
  if (rd.remaining() < count * 4) throw FormatError(context, "truncated tensor data");
  Tensor t(std::move(shape));
  for (auto& v : t.data) v = std::bit_cast<float>(rd.u32("data"));
  return t;
}

inline Json shape_json(const Shape& s) { return Json(s); }

inline Shape json_shape(const Json& j, const std::string& path, int layer, const char* what) {
  if (!j.is_array()) throw FormatError(path, std::string(what) + " must be an array", layer);
  Shape s;
  for (const auto& d : j) {
    if (!d.is_number_unsigned())
      throw FormatError(path, std::string(what) + " must hold non-negative integers", layer);
    s.push_back(d.get<std::size_t>());
  }
  return s;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Tensor blobs

inline std::string encode_blob(const Tensor& t) {
  std::string out(kBlobMagic);
  detail::put_u32(out, static_cast<std::uint32_t>(t.shape.size()));
  for (std::size_t d : t.shape) detail::put_u32(out, static_cast<std::uint32_t>(d));
  out.reserve(out.size() + 4 * t.size());
  for (float v : t.data) detail::put_u32(out, std::bit_cast<std::uint32_t>(v));
  return out;
}

/// Decodes exactly one blob occupying all of `bytes`.
inline Tensor decode_blob(std::string_view bytes, const std::string& context) {
  detail::Reader rd(bytes, context);
  Tensor t = detail::decode_blob_at(rd, context);
  if (rd.remaining() != 0)
    throw FormatError(context, std::to_string(rd.remaining()) + " trailing bytes");
  return t;
}

inline void write_blob(const fs::path& path, const Tensor& t) {
  detail::write_file(path, encode_blob(t));
}

inline Tensor read_blob(const fs::path& path) {
  return decode_blob(detail::read_file(path), path.string());
}

// ---------------------------------------------------------------------------
// Model directories: model.json plus one blob per parameter tensor.

inline void save_model(const NetworkSpec& net, const fs::path& dir) {
  require_valid(net);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError(dir.string() + ": " + ec.message());

  Json manifest;
  manifest["format_version"] = kFormatVersion;
  manifest["input_shape"] = detail::shape_json(net.input_shape);
  Json layers = Json::array();
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    const LayerSpec& l = net.layers[i];
    Json rec;
    rec["kind"] = to_string(l.kind);
    rec["activation"] = to_string(l.activation);
    if (l.parameterized()) {
      const std::string stem = "layer" + std::to_string(i);
      rec["weights"] = stem + "_weights.bin";
      rec["weights_shape"] = detail::shape_json(l.weights.shape);
      rec["bias"] = stem + "_bias.bin";
      write_blob(dir / (stem + "_weights.bin"), l.weights);
      write_blob(dir / (stem + "_bias.bin"), l.bias);
    }
    if (l.kind == LayerKind::conv2d) {
      rec["stride"] = {l.stride[0], l.stride[1]};
      rec["padding"] = {l.padding[0], l.padding[1]};
    }
    layers.push_back(std::move(rec));
  }
  manifest["layers"] = std::move(layers);
  detail::write_file(dir / kManifestName, manifest.dump(2) + "\n");
}

inline NetworkSpec load_model(const fs::path& dir) {
  const fs::path manifest_path = dir / kManifestName;
  const std::string mpath = manifest_path.string();
  if (!fs::is_directory(dir)) throw IoError(dir.string() + ": model directory not found");

  Json m;
  try {
    m = Json::parse(detail::read_file(manifest_path));
  } catch (const Json::parse_error& e) {
    throw FormatError(mpath, std::string("invalid JSON: ") + e.what());
  }
  if (!m.is_object()) throw FormatError(mpath, "manifest must be a JSON object");
  if (m.value("format_version", 0) != kFormatVersion)
    throw FormatError(mpath, "unsupported format_version");
  if (!m.contains("input_shape") || !m.contains("layers") || !m["layers"].is_array())
    throw FormatError(mpath, "manifest needs input_shape and layers");

  NetworkSpec net;
  net.input_shape = detail::json_shape(m["input_shape"], mpath, -1, "input_shape");

  const Json& layers = m["layers"];
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const Json& rec = layers[i];
    const int li = static_cast<int>(i);
    if (!rec.is_object()) throw FormatError(mpath, "layer record must be an object", li);
    const std::string kind = rec.value("kind", "");
    const std::string act = rec.value("activation", "none");

    LayerSpec layer;
    if (act == "relu") {
      layer.activation = Activation::relu;
    } else if (act == "none") {
      layer.activation = Activation::none;
    } else {
      throw FormatError(mpath, "unknown activation '" + act + "'", li);
    }

    if (kind == "flatten") {
      layer.kind = LayerKind::flatten;
      net.layers.push_back(std::move(layer));
      continue;
    }
    if (kind == "dense") {
      layer.kind = LayerKind::dense;
    } else if (kind == "conv2d") {
      layer.kind = LayerKind::conv2d;
      auto pair = [&](const char* key, std::size_t dflt) {
        if (!rec.contains(key)) return std::array<std::size_t, 2>{dflt, dflt};
        const Shape s = detail::json_shape(rec[key], mpath, li, key);
        if (s.size() != 2) throw FormatError(mpath, std::string(key) + " must have 2 entries", li);
        return std::array<std::size_t, 2>{s[0], s[1]};
      };
      layer.stride = pair("stride", 1);
      layer.padding = pair("padding", 0);
    } else {
      throw FormatError(mpath, "unknown layer kind '" + kind + "'", li);
    }

    if (!rec.contains("weights") || !rec.contains("bias") || !rec.contains("weights_shape"))
      throw FormatError(mpath, "parameterized layer needs weights, weights_shape and bias", li);
    const Shape declared = detail::json_shape(rec["weights_shape"], mpath, li, "weights_shape");

    auto load = [&](const char* key) {
      const fs::path p = dir / rec[key].get<std::string>();
      try {
        return read_blob(p);
      } catch (const FormatError& e) {
        throw FormatError(e.path(), e.reason(), li);
      } catch (const IoError&) {
        throw FormatError(p.string(), "missing or unreadable blob", li);
      }
    };
    layer.weights = load("weights");
    layer.bias = load("bias");
    const fs::path wpath = dir / rec["weights"].get<std::string>();
    if (layer.weights.shape != declared)
      throw FormatError(wpath.string(),
                        "dim mismatch: blob is " + shape_to_string(layer.weights.shape) +
                            ", layer declares " + shape_to_string(declared),
                        li);
    const Shape bias_expect{declared.empty() ? 0 : declared[0]};
    if (layer.bias.shape != bias_expect)
      throw FormatError((dir / rec["bias"].get<std::string>()).string(),
                        "dim mismatch: bias is " + shape_to_string(layer.bias.shape) +
                            ", layer declares " + shape_to_string(bias_expect),
                        li);
    net.layers.push_back(std::move(layer));
  }

  const ValidationResult v = validate_network(net);
  if (!v.ok()) {
    const Violation& first = v.violations.front();
    throw FormatError(mpath, "shape-chain violation: " + first.message, first.layer);
  }
  return net;
}

// ---------------------------------------------------------------------------
// Frame sets: a single blob of shape [N, ...input_shape] (or just
// input_shape for one frame).

inline void write_frames(const fs::path& path, std::span<const Tensor> frames) {
  if (frames.empty()) throw DataError("write_frames: no frames");
  Shape shape{frames.size()};
  shape.insert(shape.end(), frames[0].shape.begin(), frames[0].shape.end());
  Tensor all(shape);
  std::size_t off = 0;
  for (const Tensor& f : frames) {
    if (f.shape != frames[0].shape) throw ShapeError("write_frames: frames differ in shape");
    std::copy(f.data.begin(), f.data.end(), all.data.begin() + static_cast<std::ptrdiff_t>(off));
    off += f.size();
  }
  write_blob(path, all);
}

inline std::vector<Tensor> read_frames(const fs::path& path, const Shape& frame_shape) {
  Tensor all = read_blob(path);
  std::vector<Tensor> out;
  if (all.shape == frame_shape) {
    out.push_back(std::move(all));
  } else if (all.rank() == frame_shape.size() + 1 &&
             Shape(all.shape.begin() + 1, all.shape.end()) == frame_shape) {
    const std::size_t n = all.shape[0], sz = shape_size(frame_shape);
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
      Tensor f(frame_shape);
      std::copy_n(all.data.begin() + static_cast<std::ptrdiff_t>(i * sz), sz, f.data.begin());
      out.push_back(std::move(f));
    }
  } else {
    throw FormatError(path.string(), "frame set shape " + shape_to_string(all.shape) +
                                         " does not match input " +
                                         shape_to_string(frame_shape));
  }
  for (std::size_t i = 0; i < out.size(); ++i) {
    for (float v : out[i].data)
      if (!(v >= 0.0f && v <= 1.0f))
        throw FormatError(path.string(),
                          "frame " + std::to_string(i) + " has values outside [0, 1]");
  }
  return out;
}

// ---------------------------------------------------------------------------
// Episode traces

struct TraceStep {
  Tensor observation;
  std::uint32_t source_action = 0;
  double reward = 0.0;

  friend bool operator==(const TraceStep&, const TraceStep&) = default;
};

struct EpisodeTrace {
  std::uint32_t action_count = 0;
  Shape observation_shape;
  std::vector<TraceStep> steps;

  friend bool operator==(const EpisodeTrace&, const EpisodeTrace&) = default;
};

inline void check_trace(const EpisodeTrace& trace, const std::string& context) {
  if (trace.action_count == 0) throw FormatError(context, "action count must be positive");
  for (std::size_t i = 0; i < trace.steps.size(); ++i) {
    const TraceStep& s = trace.steps[i];
    if (s.source_action >= trace.action_count)
      throw FormatError(context, "step " + std::to_string(i) + ": action " +
                                     std::to_string(s.source_action) + " >= action count " +
                                     std::to_string(trace.action_count));
    if (s.observation.shape != trace.observation_shape)
      throw FormatError(context, "step " + std::to_string(i) + ": observation shape " +
                                     shape_to_string(s.observation.shape) +
                                     " differs from header " +
                                     shape_to_string(trace.observation_shape));
    for (float v : s.observation.data)
      if (!(v >= 0.0f && v <= 1.0f))
        throw FormatError(context,
                          "step " + std::to_string(i) + ": observation outside [0, 1]");
  }
}

inline std::string encode_trace(const EpisodeTrace& trace) {
  check_trace(trace, "trace");
  std::string out(kTraceMagic);
  detail::put_u32(out, trace.action_count);
  detail::put_u32(out, static_cast<std::uint32_t>(trace.observation_shape.size()));
  for (std::size_t d : trace.observation_shape)
    detail::put_u32(out, static_cast<std::uint32_t>(d));
  detail::put_u32(out, static_cast<std::uint32_t>(trace.steps.size()));
  for (const TraceStep& s : trace.steps) {
    out += encode_blob(s.observation);
    detail::put_u32(out, s.source_action);
    detail::put_u64(out, std::bit_cast<std::uint64_t>(s.reward));
  }
  return out;
}

inline EpisodeTrace decode_trace(std::string_view bytes, const std::string& context) {
  detail::Reader rd(bytes, context);
  if (rd.take(kTraceMagic.size(), "magic") != kTraceMagic)
    throw FormatError(context, "bad magic, expected SNNR0001");
  EpisodeTrace trace;
  trace.action_count = rd.u32("action count");
  const std::uint32_t ndim = rd.u32("observation rank");
  if (ndim > 16) throw FormatError(context, "implausible observation rank");
  trace.observation_shape.resize(ndim);
  for (auto& d : trace.observation_shape) d = rd.u32("observation dims");
  const std::uint32_t n = rd.u32("step count");
  const std::size_t min_step = kBlobMagic.size() + 4 + 4 * ndim + 12;
  if (rd.remaining() / min_step < n) throw FormatError(context, "truncated: too few steps");
  trace.steps.reserve(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    TraceStep s;
    s.observation = detail::decode_blob_at(rd, context + " step " + std::to_string(i));
    s.source_action = rd.u32("source action");
    s.reward = std::bit_cast<double>(rd.u64("reward"));
    trace.steps.push_back(std::move(s));
  }
  if (rd.remaining() != 0)
    throw FormatError(context, std::to_string(rd.remaining()) + " trailing bytes");
  check_trace(trace, context);
  return trace;
}

inline void write_trace(const EpisodeTrace& trace, const fs::path& path) {
  detail::write_file(path, encode_trace(trace));
}

inline EpisodeTrace read_trace(const fs::path& path) {
  return decode_trace(detail::read_file(path), path.string());
}

// ---------------------------------------------------------------------------
// Normalization statistics (JSON)

inline Json stats_to_json(const NormStats& s) {
  Json j;
  j["format_version"] = kFormatVersion;
  j["percentile"] = s.config.percentile;
  j["max_frames"] = s.config.max_frames;
  j["provenance"] = s.provenance;
  j["warnings"] = s.warnings;
  Json layers = Json::array();
  for (std::size_t l = 0; l < s.lambda.size(); ++l) {
    layers.push_back({{"index", l},
                      {"lambda", s.lambda[l]},
                      {"samples", l < s.sample_counts.size() ? s.sample_counts[l] : 0}});
  }
  j["layers"] = std::move(layers);
  return j;
}

inline NormStats stats_from_json(const Json& j, const std::string& context) {
  try {
    NormStats s;
    s.config.percentile = j.at("percentile").get<double>();
    s.config.max_frames = j.at("max_frames").get<std::size_t>();
    s.provenance = j.value("provenance", "");
    s.warnings = j.value("warnings", std::vector<std::string>{});
    const Json& layers = j.at("layers");
    for (std::size_t l = 0; l < layers.size(); ++l) {
      if (layers[l].at("index").get<std::size_t>() != l)
        throw FormatError(context, "layers must be listed in index order", static_cast<int>(l));
      s.lambda.push_back(layers[l].at("lambda").get<double>());
      s.sample_counts.push_back(layers[l].value("samples", std::size_t{0}));
    }
    return s;
  } catch (const Json::exception& e) {
    throw FormatError(context, std::string("malformed stats: ") + e.what());
  }
}

inline void write_stats(const NormStats& s, const fs::path& path) {
  detail::write_file(path, stats_to_json(s).dump(2) + "\n");
}

inline NormStats read_stats(const fs::path& path) {
  Json j;
  try {
    j = Json::parse(detail::read_file(path));
  } catch (const Json::parse_error& e) {
    throw FormatError(path.string(), std::string("invalid JSON: ") + e.what());
  }
  return stats_from_json(j, path.string());
}

// ---------------------------------------------------------------------------
// Per-run diagnostics (JSON)

inline Json diagnostics_json(const SimResult& result, const NetworkSpec& net,
                             const SimConfig& config) {
  const auto identity = layer_identity_residual(result, net, config);
  const auto cases = classify_residual_cases(result);
  Json j;
  j["timesteps"] = result.timesteps;
  j["v_thr"] = result.v_thr;
  j["settle_step"] = result.settle_step;
  j["f_last"] = result.f_last;
  Json layers = Json::array();
  for (std::size_t p = 0; p < result.rates.size(); ++p) {
    Json l;
    l["index"] = p;
    l["rates"] = result.rates[p];
    l["residuals"] = result.residuals[p];
    l["identity_residual"] = identity[p];
    l["cases"] = {{"charged", cases[p].charged},
                  {"overdraft", cases[p].overdraft},
                  {"suppressed", cases[p].suppressed},
                  {"idle", cases[p].idle},
                  {"impossible", cases[p].impossible}};
    layers.push_back(std::move(l));
  }
  j["layers"] = std::move(layers);
  return j;
}

// ---------------------------------------------------------------------------
// CSV reports

struct ReportRow {
  std::string sweep_param;
  double value = 0.0;
  std::size_t episodes = 0;
  double mean_score = 0.0;
  double std_score = 0.0;
  double mean_cr = 0.0;
  double std_cr = 0.0;
  double pearson_score_cr = std::numeric_limits<double>::quiet_NaN();
};

inline constexpr std::string_view kReportHeader =
    "sweep_param,value,episodes,mean_score,std_score,mean_cr,std_cr,pearson_score_cr";

/// Fixed-point rendering with 9 decimal places; NaN renders as "nan".
inline std::string format_real(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9f", v);
  return buf;
}

inline std::string format_report(std::span<const ReportRow> rows) {
  std::string out(kReportHeader);
  out += "\n";
  for (const ReportRow& r : rows) {
    if (r.sweep_param.find_first_of(",\"\n") != std::string::npos)
      throw DataError("sweep_param must not contain commas, quotes or newlines");
    out += r.sweep_param + "," + format_real(r.value) + "," + std::to_string(r.episodes) +
           "," + format_real(r.mean_score) + "," + format_real(r.std_score) + "," +
           format_real(r.mean_cr) + "," + format_real(r.std_cr) + "," +
           format_real(r.pearson_score_cr) + "\n";
  }
  return out;
}

inline void write_report(std::span<const ReportRow> rows, const fs::path& path) {
  detail::write_file(path, format_report(rows));
}

inline std::vector<ReportRow> parse_report(std::string_view text, const std::string& context) {
  std::vector<ReportRow> rows;
  std::istringstream in{std::string(text)};
  std::string line;
  if (!std::getline(in, line) || line != kReportHeader)
    throw FormatError(context, "missing or unexpected CSV header");
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (cells.size() != 8)
      throw FormatError(context, "line " + std::to_string(lineno) + ": expected 8 fields");
    auto real = [&](const std::string& s) {
      char* end = nullptr;
      const double v = std::strtod(s.c_str(), &end);
      if (end == s.c_str() || *end != '\0')
        throw FormatError(context, "line " + std::to_string(lineno) + ": bad number '" + s + "'");
      return v;
    };
    ReportRow r;
    r.sweep_param = cells[0];
    r.value = real(cells[1]);
    r.episodes = static_cast<std::size_t>(real(cells[2]));
    r.mean_score = real(cells[3]);
    r.std_score = real(cells[4]);
    r.mean_cr = real(cells[5]);
    r.std_cr = real(cells[6]);
    r.pearson_score_cr = real(cells[7]);
    rows.push_back(std::move(r));
  }
  return rows;
}

inline std::vector<ReportRow> read_report(const fs::path& path) {
  return parse_report(detail::read_file(path), path.string());
}

}  // namespace rateconv
