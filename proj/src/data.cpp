#include "tcan/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "tcan/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace tcan {

namespace {

constexpr char kBinMagic[4] = {'T', 'C', 'A', 'N'};
constexpr std::uint32_t kBinVersion = 1;

std::vector<float> unit_direction(int d, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<float> u(d);
  double norm = 0.0;
  for (int i = 0; i < d; ++i) {
    u[i] = static_cast<float>(rng.normal());
    norm += static_cast<double>(u[i]) * u[i];
  }
  norm = std::sqrt(norm);
  if (norm == 0.0) norm = 1.0;
  for (int i = 0; i < d; ++i) u[i] = static_cast<float>(u[i] / norm);
  return u;
}

SeqData gen_sequence(Rng& rng, float label, int d, int len_min, int len_max, float snr,
                     float p_flip, float burst_rate, const std::vector<float>& dir) {
  SeqData s;
  s.len = rng.uniform_int(len_min, len_max);
  s.width = d;
  s.values.resize(static_cast<std::size_t>(s.len) * d);
  const float sign = rng.bernoulli(p_flip) ? -1.0f : 1.0f;
  const float mag = snr * sign * label;
  for (int t = 0; t < s.len; ++t) {
    const float amp = (burst_rate > 0.0f && rng.bernoulli(burst_rate)) ? 10.0f : 1.0f;
    for (int j = 0; j < d; ++j) {
      s.values[static_cast<std::size_t>(t) * d + j] =
          mag * dir[j] + amp * static_cast<float>(rng.normal());
    }
  }
  return s;
}

void validate_sample(const Sample& s, const DatasetManifest& m, const std::string& file) {
  auto check_seq = [&](const SeqData& q, int want_width, const char* modality) {
    if (q.len < 1) {
      throw IngestError(file + ": sample " + s.id + ": empty " + modality + " sequence");
    }
    if (q.width != want_width) {
      throw IngestError(file + ": sample " + s.id + ": " + modality + " width " +
                        std::to_string(q.width) + " does not match manifest width " +
                        std::to_string(want_width));
    }
    if (static_cast<int>(q.values.size()) != q.len * q.width) {
      throw IngestError(file + ": sample " + s.id + ": ragged " + modality + " rows");
    }
  };
  check_seq(s.text, m.d_t, "text");
  check_seq(s.visual, m.d_v, "visual");
  check_seq(s.acoustic, m.d_a, "acoustic");
  if (!(s.label >= -3.0f && s.label <= 3.0f) || !std::isfinite(s.label)) {
    std::ostringstream os;
    os << file << ": sample " << s.id << ": label " << s.label << " outside [-3, 3]";
    throw IngestError(os.str());
  }
}

// ---- NDJSON ------------------------------------------------------------

json seq_to_json(const SeqData& s) {
  json rows = json::array();
  for (int t = 0; t < s.len; ++t) {
    json row = json::array();
    for (int j = 0; j < s.width; ++j) {
      row.push_back(static_cast<double>(s.at(t, j)));
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

SeqData seq_from_json(const json& rows, const std::string& file, const std::string& id,
                      const char* modality) {
  if (!rows.is_array() || rows.empty()) {
    throw IngestError(file + ": sample " + id + ": " + modality + " is not a non-empty array");
  }
  SeqData s;
  s.len = static_cast<int>(rows.size());
  s.width = static_cast<int>(rows[0].size());
  s.values.reserve(static_cast<std::size_t>(s.len) * s.width);
  for (const json& row : rows) {
    if (!row.is_array() || static_cast<int>(row.size()) != s.width) {
      throw IngestError(file + ": sample " + id + ": ragged " + modality + " rows");
    }
    for (const json& v : row) {
      if (!v.is_number()) {
        throw IngestError(file + ": sample " + id + ": non-numeric value in " + modality);
      }
      s.values.push_back(static_cast<float>(v.get<double>()));
    }
  }
  return s;
}

void write_split_ndjson(const std::vector<Sample>& samples, const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IngestError("cannot open " + path.string() + " for writing");
  for (const Sample& s : samples) {
    json rec;
    rec["id"] = s.id;
    rec["label"] = static_cast<double>(s.label);
    rec["text"] = seq_to_json(s.text);
    rec["visual"] = seq_to_json(s.visual);
    rec["acoustic"] = seq_to_json(s.acoustic);
    out << rec.dump() << "\n";
  }
}

std::vector<Sample> read_split_ndjson(const fs::path& path, std::ifstream& in) {
  std::vector<Sample> samples;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::parse_error& e) {
      throw IngestError(path.string() + ":" + std::to_string(line_no) + ": corrupt record: " +
                        e.what());
    }
    Sample s;
    if (!rec.contains("id") || !rec["id"].is_string()) {
      throw IngestError(path.string() + ":" + std::to_string(line_no) + ": record without id");
    }
    s.id = rec["id"].get<std::string>();
    if (!rec.contains("label") || !rec["label"].is_number()) {
      throw IngestError(path.string() + ": sample " + s.id + ": missing label");
    }
    s.label = static_cast<float>(rec["label"].get<double>());
    for (const char* key : {"text", "visual", "acoustic"}) {
      if (!rec.contains(key)) {
        throw IngestError(path.string() + ": sample " + s.id + ": missing " + key);
      }
    }
    s.text = seq_from_json(rec["text"], path.string(), s.id, "text");
    s.visual = seq_from_json(rec["visual"], path.string(), s.id, "visual");
    s.acoustic = seq_from_json(rec["acoustic"], path.string(), s.id, "acoustic");
    samples.push_back(std::move(s));
  }
  return samples;
}

// ---- binary ------------------------------------------------------------

void put_u16(std::string& buf, std::uint16_t v) {
  buf.push_back(static_cast<char>(v & 0xff));
  buf.push_back(static_cast<char>((v >> 8) & 0xff));
}

void put_u32(std::string& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f32(std::string& buf, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(buf, bits);
}

struct BinReader {
  const std::string& buf;
  std::size_t pos = 0;
  std::string file;

  void need(std::size_t n) {
    if (pos + n > buf.size()) throw IngestError(file + ": truncated binary split");
  }
  std::uint16_t u16() {
    need(2);
    const auto* p = reinterpret_cast<const unsigned char*>(buf.data() + pos);
    pos += 2;
    return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
  }
  std::uint32_t u32() {
    need(4);
    const auto* p = reinterpret_cast<const unsigned char*>(buf.data() + pos);
    pos += 4;
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
  }
  float f32() {
    const std::uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
};

void write_split_binary(const std::vector<Sample>& samples, const fs::path& path) {
  std::string buf;
  buf.append(kBinMagic, 4);
  put_u32(buf, kBinVersion);
  put_u32(buf, static_cast<std::uint32_t>(samples.size()));
  auto put_seq = [&](const SeqData& s) {
    put_u32(buf, static_cast<std::uint32_t>(s.len));
    put_u32(buf, static_cast<std::uint32_t>(s.width));
    for (float v : s.values) put_f32(buf, v);
  };
  for (const Sample& s : samples) {
    put_u16(buf, static_cast<std::uint16_t>(s.id.size()));
    buf += s.id;
    put_f32(buf, s.label);
    put_seq(s.text);
    put_seq(s.visual);
    put_seq(s.acoustic);
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IngestError("cannot open " + path.string() + " for writing");
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

std::vector<Sample> read_split_binary(const fs::path& path, const std::string& buf) {
  BinReader r{buf, 4, path.string()};  // magic already checked
  const std::uint32_t version = r.u32();
  if (version != kBinVersion) {
    throw IngestError(path.string() + ": unsupported binary version " + std::to_string(version));
  }
  const std::uint32_t n = r.u32();
  std::vector<Sample> samples;
  samples.reserve(n);
  auto get_seq = [&](const std::string& id, const char* modality) {
    SeqData s;
    s.len = static_cast<int>(r.u32());
    s.width = static_cast<int>(r.u32());
    if (s.len < 0 || s.width < 0 || s.len > (1 << 24) || s.width > (1 << 16)) {
      throw IngestError(path.string() + ": sample " + id + ": implausible " + modality +
                        " extents");
    }
    const std::size_t count = static_cast<std::size_t>(s.len) * s.width;
    s.values.resize(count);
    for (std::size_t i = 0; i < count; ++i) s.values[i] = r.f32();
    return s;
  };
  for (std::uint32_t i = 0; i < n; ++i) {
    Sample s;
    const std::uint16_t id_len = r.u16();
    s.id = r.bytes(id_len);
    s.label = r.f32();
    s.text = get_seq(s.id, "text");
    s.visual = get_seq(s.id, "visual");
    s.acoustic = get_seq(s.id, "acoustic");
    samples.push_back(std::move(s));
  }
  return samples;
}

std::vector<Sample> read_split(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestError("missing dataset file: " + path.string());
  char magic[4] = {0, 0, 0, 0};
  in.read(magic, 4);
  const bool is_binary = in.gcount() == 4 && std::memcmp(magic, kBinMagic, 4) == 0;
  in.clear();
  in.seekg(0);
  if (is_binary) {
    std::ostringstream ss;
    ss << in.rdbuf();
    const std::string buf = ss.str();
    return read_split_binary(path, buf);
  }
  return read_split_ndjson(path, in);
}

}  // namespace

LoadedDataset generate_synthetic(const SyntheticConfig& cfg) {
  if (cfg.n_train < 1 || cfg.n_val < 0 || cfg.n_test < 0) {
    throw IngestError("generate_synthetic: split sizes must be positive");
  }
  auto check_mod = [](float snr, float p_flip, const char* m) {
    if (!(snr > 0.0f)) throw IngestError(std::string("generate_synthetic: snr_") + m + " must be > 0");
    if (!(p_flip >= 0.0f && p_flip < 0.5f)) {
      throw IngestError(std::string("generate_synthetic: p_flip_") + m + " must lie in [0, 0.5)");
    }
  };
  check_mod(cfg.snr_t, cfg.p_flip_t, "t");
  check_mod(cfg.snr_v, cfg.p_flip_v, "v");
  check_mod(cfg.snr_a, cfg.p_flip_a, "a");
  auto check_len = [](int lo, int hi, const char* m) {
    if (lo < 1 || hi < lo) {
      throw IngestError(std::string("generate_synthetic: bad length range for ") + m);
    }
  };
  check_len(cfg.len_t_min, cfg.len_t_max, "text");
  check_len(cfg.len_v_min, cfg.len_v_max, "visual");
  check_len(cfg.len_a_min, cfg.len_a_max, "acoustic");
  if (cfg.d_t < 1 || cfg.d_v < 1 || cfg.d_a < 1) {
    throw IngestError("generate_synthetic: feature widths must be >= 1");
  }

  const std::vector<float> dir_t = unit_direction(cfg.d_t, mix_seed(cfg.seed, fnv1a64("dir.t")));
  const std::vector<float> dir_v = unit_direction(cfg.d_v, mix_seed(cfg.seed, fnv1a64("dir.v")));
  const std::vector<float> dir_a = unit_direction(cfg.d_a, mix_seed(cfg.seed, fnv1a64("dir.a")));

  LoadedDataset ds;
  ds.manifest.d_t = cfg.d_t;
  ds.manifest.d_v = cfg.d_v;
  ds.manifest.d_a = cfg.d_a;
  ds.manifest.n_train = cfg.n_train;
  ds.manifest.n_val = cfg.n_val;
  ds.manifest.n_test = cfg.n_test;
  ds.manifest.splits = {"train.ndjson", "val.ndjson", "test.ndjson"};

  Rng rng(mix_seed(cfg.seed, fnv1a64("samples")));
  int next_id = 0;
  auto gen_split = [&](int n) {
    std::vector<Sample> out;
    out.reserve(n);
    for (int i = 0; i < n; ++i) {
      Sample s;
      char idbuf[16];
      std::snprintf(idbuf, sizeof(idbuf), "s%06d", next_id++);
      s.id = idbuf;
      s.label = static_cast<float>(rng.uniform(-3.0, 3.0));
      s.text = gen_sequence(rng, s.label, cfg.d_t, cfg.len_t_min, cfg.len_t_max, cfg.snr_t,
                            cfg.p_flip_t, 0.0f, dir_t);
      s.visual = gen_sequence(rng, s.label, cfg.d_v, cfg.len_v_min, cfg.len_v_max, cfg.snr_v,
                              cfg.p_flip_v, cfg.burst_v, dir_v);
      s.acoustic = gen_sequence(rng, s.label, cfg.d_a, cfg.len_a_min, cfg.len_a_max, cfg.snr_a,
                                cfg.p_flip_a, cfg.burst_a, dir_a);
      out.push_back(std::move(s));
    }
    return out;
  };
  ds.train = gen_split(cfg.n_train);
  ds.val = gen_split(cfg.n_val);
  ds.test = gen_split(cfg.n_test);
  return ds;
}

LoadedDataset load_dataset(const std::string& path) {
  fs::path manifest_path(path);
  if (fs::is_directory(manifest_path)) manifest_path /= "dataset.json";
  std::ifstream in(manifest_path);
  if (!in) throw IngestError("missing dataset manifest: " + manifest_path.string());
  json m;
  try {
    m = json::parse(in);
  } catch (const json::parse_error& e) {
    throw IngestError(manifest_path.string() + ": corrupt manifest: " + e.what());
  }
  LoadedDataset ds;
  for (const char* key : {"d_t", "d_v", "d_a", "splits"}) {
    if (!m.contains(key)) {
      throw IngestError(manifest_path.string() + ": manifest missing field " + key);
    }
  }
  ds.manifest.d_t = m["d_t"].get<int>();
  ds.manifest.d_v = m["d_v"].get<int>();
  ds.manifest.d_a = m["d_a"].get<int>();
  const json& sp = m["splits"];
  for (const char* key : {"train", "val", "test"}) {
    if (!sp.contains(key) || !sp[key].is_string()) {
      throw IngestError(manifest_path.string() + ": manifest splits missing " + key);
    }
  }
  ds.manifest.splits.train = sp["train"].get<std::string>();
  ds.manifest.splits.val = sp["val"].get<std::string>();
  ds.manifest.splits.test = sp["test"].get<std::string>();

  const fs::path dir = manifest_path.parent_path();
  ds.train = read_split(dir / ds.manifest.splits.train);
  ds.val = read_split(dir / ds.manifest.splits.val);
  ds.test = read_split(dir / ds.manifest.splits.test);
  ds.manifest.n_train = static_cast<int>(ds.train.size());
  ds.manifest.n_val = static_cast<int>(ds.val.size());
  ds.manifest.n_test = static_cast<int>(ds.test.size());

  if (m.contains("counts")) {
    const json& c = m["counts"];
    auto check_count = [&](const char* key, int have) {
      if (c.contains(key) && c[key].get<int>() != have) {
        throw IngestError(manifest_path.string() + ": split " + key + " has " +
                          std::to_string(have) + " records, manifest says " +
                          std::to_string(c[key].get<int>()));
      }
    };
    check_count("train", ds.manifest.n_train);
    check_count("val", ds.manifest.n_val);
    check_count("test", ds.manifest.n_test);
  }

  auto validate_split = [&](const std::vector<Sample>& samples, const std::string& file) {
    for (const Sample& s : samples) validate_sample(s, ds.manifest, file);
  };
  validate_split(ds.train, ds.manifest.splits.train);
  validate_split(ds.val, ds.manifest.splits.val);
  validate_split(ds.test, ds.manifest.splits.test);
  return ds;
}

void write_dataset(const LoadedDataset& ds, const std::string& dir, bool binary) {
  fs::create_directories(dir);
  const fs::path base(dir);
  DatasetManifest m = ds.manifest;
  const char* ext = binary ? ".bin" : ".ndjson";
  m.splits.train = std::string("train") + ext;
  m.splits.val = std::string("val") + ext;
  m.splits.test = std::string("test") + ext;

  json j;
  j["d_t"] = m.d_t;
  j["d_v"] = m.d_v;
  j["d_a"] = m.d_a;
  j["splits"] = {{"train", m.splits.train}, {"val", m.splits.val}, {"test", m.splits.test}};
  j["counts"] = {{"train", ds.train.size()}, {"val", ds.val.size()}, {"test", ds.test.size()}};
  std::ofstream out(base / "dataset.json");
  if (!out) throw IngestError("cannot open " + (base / "dataset.json").string() + " for writing");
  out << j.dump(2) << "\n";

  if (binary) {
    write_split_binary(ds.train, base / m.splits.train);
    write_split_binary(ds.val, base / m.splits.val);
    write_split_binary(ds.test, base / m.splits.test);
  } else {
    write_split_ndjson(ds.train, base / m.splits.train);
    write_split_ndjson(ds.val, base / m.splits.val);
    write_split_ndjson(ds.test, base / m.splits.test);
  }
}

std::vector<std::vector<int>> epoch_batches(int n, int batch_size, std::uint64_t seed, int epoch) {
  if (n < 1) throw IngestError("epoch_batches: empty dataset");
  if (batch_size < 1) throw IngestError("epoch_batches: batch_size must be >= 1");
  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) order[i] = i;
  Rng rng(mix_seed(seed, fnv1a64("shuffle") + static_cast<std::uint64_t>(epoch)));
  for (int i = n - 1; i > 0; --i) {
    const int j = rng.uniform_int(0, i);
    std::swap(order[i], order[j]);
  }
  std::vector<std::vector<int>> batches;
  for (int start = 0; start < n; start += batch_size) {
    const int end = std::min(n, start + batch_size);
    batches.emplace_back(order.begin() + start, order.begin() + end);
  }
  return batches;
}

}  // namespace tcan
