#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include <json.hpp>

#include "scalenet/errors.hpp"
#include "scalenet/mapping.hpp"
#include "scalenet/tensor.hpp"
#include "scalenet/vit.hpp"

// Checkpoint layout (all integers little-endian):
//   "SCNT"            4-byte magic
//   u32               format version, currently 1
//   u64               metadata byte length
//   bytes             metadata JSON (config, drop_path, expansion, params)
//   u64               tensor count
//   per tensor:
//     u32, bytes      name length, name
//     u8              dtype: 0 = f32, 1 = f64
//     u32             rank
//     u64 * rank      dims
//     bytes           values, dtype-sized little-endian words
// Aliased parameters are written once under the first name that reaches the
// storage; the metadata "params" list maps every slot back to that name.

namespace scalenet {

namespace detail {

inline constexpr char kCheckpointMagic[4] = {'S', 'C', 'N', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <class Real>
constexpr std::uint8_t dtype_code() {
  static_assert(std::is_same_v<Real, float> || std::is_same_v<Real, double>,
                "checkpoints hold f32 or f64 tensors");
  return std::is_same_v<Real, float> ? 0 : 1;
}

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

inline void put_real(std::string& out, float v) {
  put_u32(out, std::bit_cast<std::uint32_t>(v));
}

inline void put_real(std::string& out, double v) {
  put_u64(out, std::bit_cast<std::uint64_t>(v));
}

// Bounds-checked cursor over the raw checkpoint bytes. Running past the end
// means a truncated or corrupt file.
class ByteReader {
 public:
  ByteReader(const std::string& bytes, std::string path)
      : bytes_(bytes), path_(std::move(path)) {}

  const char* take(std::size_t n) {
    if (pos_ + n > bytes_.size()) {
      throw io_error("checkpoint '" + path_ + "' truncated at byte " +
                     std::to_string(pos_));
    }
    const char* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }

  std::uint32_t u32() {
    const unsigned char* p = reinterpret_cast<const unsigned char*>(take(4));
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(p[i]) << (8 * i);
    return v;
  }

  std::uint64_t u64() {
    const unsigned char* p = reinterpret_cast<const unsigned char*>(take(8));
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(p[i]) << (8 * i);
    return v;
  }

  std::uint8_t u8() {
    return std::uint8_t(*reinterpret_cast<const unsigned char*>(take(1)));
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  const std::string& bytes_;
  std::string path_;
  std::size_t pos_ = 0;
};

template <class Real>
Real read_real(ByteReader& r) {
  if constexpr (std::is_same_v<Real, float>) {
    return std::bit_cast<float>(r.u32());
  } else {
    return std::bit_cast<double>(r.u64());
  }
}

// Zero-weight model with every slot at its configured shape, used as the
// binding target and shape oracle when loading.
template <class Real>
Model<Real> make_skeleton(const ViTConfig& cfg,
                          const std::optional<ExpansionInfo>& expansion) {
  cfg.validate();
  const std::size_t d = cfg.dim, hidden = cfg.mlp_hidden();
  Model<Real> m;
  m.config = cfg;
  m.expansion = expansion;
  m.patch_weight = Tensor<Real>({cfg.patch_dim(), d});
  m.patch_bias = Tensor<Real>({d});
  m.pos_embed = Tensor<Real>({cfg.tokens(), d});
  m.cls_token = Tensor<Real>({1, d});
  m.blocks.resize(cfg.depth);
  for (TransformerBlock<Real>& b : m.blocks) {
    b.ln1_gamma = Tensor<Real>({d});
    b.ln1_beta = Tensor<Real>({d});
    b.qkv_weight = Tensor<Real>({d, 3 * d});
    b.qkv_bias = Tensor<Real>({3 * d});
    b.proj_weight = Tensor<Real>({d, d});
    b.proj_bias = Tensor<Real>({d});
    b.ln2_gamma = Tensor<Real>({d});
    b.ln2_beta = Tensor<Real>({d});
    b.fc1_weight = Tensor<Real>({d, hidden});
    b.fc1_bias = Tensor<Real>({hidden});
    b.fc2_weight = Tensor<Real>({hidden, d});
    b.fc2_bias = Tensor<Real>({d});
    if (expansion && expansion->adjust) {
      const AdjustConfig& a = *expansion->adjust;
      b.fc1_adjust = Adjustment<Real>{a.kind, a.rank, Tensor<Real>({d, a.rank}),
                                      Tensor<Real>({a.rank, hidden})};
      b.fc2_adjust =
          Adjustment<Real>{a.kind, a.rank, Tensor<Real>({hidden, a.rank}),
                           Tensor<Real>({a.rank, d})};
    }
  }
  m.head_norm_gamma = Tensor<Real>({d});
  m.head_norm_beta = Tensor<Real>({d});
  m.head_weight = Tensor<Real>({d, cfg.classes});
  m.head_bias = Tensor<Real>({cfg.classes});
  return m;
}

}  // namespace detail

template <class Real>
void save_checkpoint(const Model<Real>& model, const std::string& path) {
  // Canonical name per storage: the first slot that reaches it.
  std::unordered_map<const TensorData<Real>*, std::string> canonical;
  std::vector<std::pair<std::string, Tensor<Real>>> unique;
  nlohmann::json params = nlohmann::json::array();
  detail::visit_params(
      const_cast<Model<Real>&>(model),
      [&](const std::string& name, Tensor<Real>& t) {
        auto [it, inserted] = canonical.emplace(t.ptr().get(), name);
        if (inserted) unique.emplace_back(name, t);
        params.push_back({{"name", name}, {"storage", it->second}});
      });

  nlohmann::json drop_path = nlohmann::json::array();
  for (const TransformerBlock<Real>& b : model.blocks)
    drop_path.push_back(b.drop_path_prob);

  nlohmann::json meta{{"config", model.config},
                      {"drop_path", drop_path},
                      {"expansion", nullptr},
                      {"params", params}};
  if (model.expansion) meta["expansion"] = *model.expansion;
  const std::string meta_text = meta.dump();

  std::string out;
  out.append(detail::kCheckpointMagic, 4);
  detail::put_u32(out, detail::kCheckpointVersion);
  detail::put_u64(out, meta_text.size());
  out += meta_text;
  detail::put_u64(out, unique.size());
  for (auto& [name, t] : unique) {
    detail::put_u32(out, std::uint32_t(name.size()));
    out += name;
    out.push_back(char(detail::dtype_code<Real>()));
    detail::put_u32(out, std::uint32_t(t.rank()));
    for (std::size_t dim : t.shape()) detail::put_u64(out, dim);
    for (Real v : t.values()) detail::put_real(out, v);
  }

  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw io_error("cannot open '" + tmp + "' for writing");
    f.write(out.data(), std::streamsize(out.size()));
    f.flush();
    if (!f) throw io_error("failed while writing '" + tmp + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    throw io_error("cannot move '" + tmp + "' to '" + path + "': " +
                   ec.message());
  }
}

template <class Real>
Model<Real> load_checkpoint(const std::string& path) {
  std::string bytes;
  {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw io_error("cannot open checkpoint '" + path + "'");
    std::ostringstream ss;
    ss << f.rdbuf();
    bytes = std::move(ss).str();
  }
  detail::ByteReader r(bytes, path);

  if (std::memcmp(r.take(4), detail::kCheckpointMagic, 4) != 0) {
    throw format_error("'" + path + "' is not a checkpoint (bad magic)");
  }
  const std::uint32_t version = r.u32();
  if (version != detail::kCheckpointVersion) {
    throw format_error("checkpoint '" + path + "' has unsupported version " +
                       std::to_string(version));
  }
  const std::uint64_t meta_len = r.u64();
  nlohmann::json meta;
  try {
    const char* p = r.take(meta_len);
    meta = nlohmann::json::parse(p, p + meta_len);
  } catch (const nlohmann::json::exception& e) {
    throw format_error("checkpoint '" + path + "' has bad metadata: " +
                       e.what());
  }

  ViTConfig cfg;
  std::optional<ExpansionInfo> expansion;
  std::vector<double> drop_path;
  std::vector<std::pair<std::string, std::string>> assignments;
  try {
    meta.at("config").get_to(cfg);
    if (!meta.at("expansion").is_null()) {
      expansion = meta.at("expansion").get<ExpansionInfo>();
    }
    meta.at("drop_path").get_to(drop_path);
    for (const nlohmann::json& p : meta.at("params")) {
      assignments.emplace_back(p.at("name").get<std::string>(),
                               p.at("storage").get<std::string>());
    }
  } catch (const nlohmann::json::exception& e) {
    throw format_error("checkpoint '" + path + "' has bad metadata: " +
                       e.what());
  }

  const std::uint64_t tensor_count = r.u64();
  std::unordered_map<std::string, Tensor<Real>> storages;
  for (std::uint64_t i = 0; i < tensor_count; ++i) {
    const std::uint32_t name_len = r.u32();
    std::string name(r.take(name_len), name_len);
    const std::uint8_t dtype = r.u8();
    if (dtype != detail::dtype_code<Real>()) {
      throw format_error("checkpoint '" + path + "' tensor '" + name +
                         "' has dtype code " + std::to_string(dtype) +
                         ", expected " +
                         std::to_string(detail::dtype_code<Real>()));
    }
    const std::uint32_t ndim = r.u32();
    Shape shape(ndim);
    for (std::uint32_t a = 0; a < ndim; ++a) shape[a] = std::size_t(r.u64());
    std::vector<Real> values(shape_numel(shape));
    for (Real& v : values) v = detail::read_real<Real>(r);
    Tensor<Real> t(std::move(shape), std::move(values));
    t.set_requires_grad(true);
    if (storages.count(name)) {
      throw format_error("checkpoint '" + path + "' repeats tensor '" + name +
                         "'");
    }
    storages.emplace(std::move(name), t);
  }
  if (!r.done()) {
    throw format_error("checkpoint '" + path + "' has trailing bytes");
  }

  Model<Real> model = detail::make_skeleton<Real>(cfg, expansion);
  if (drop_path.size() != model.blocks.size()) {
    throw format_error("checkpoint '" + path + "' drop_path length " +
                       std::to_string(drop_path.size()) + " vs depth " +
                       std::to_string(model.blocks.size()));
  }
  for (std::size_t i = 0; i < model.blocks.size(); ++i)
    model.blocks[i].drop_path_prob = drop_path[i];

  // Bind every slot to its storage, in the same canonical order used when
  // saving; a name mismatch means the metadata does not describe this
  // architecture.
  std::size_t next = 0;
  detail::visit_params(model, [&](const std::string& name, Tensor<Real>& t) {
    if (next >= assignments.size() || assignments[next].first != name) {
      throw format_error("checkpoint '" + path + "' params list differs at '" +
                         name + "'");
    }
    auto it = storages.find(assignments[next].second);
    if (it == storages.end()) {
      throw format_error("checkpoint '" + path + "' references missing "
                         "tensor '" + assignments[next].second + "'");
    }
    if (it->second.shape() != t.shape()) {
      throw format_error("checkpoint '" + path + "' tensor '" + name +
                         "' has shape " + shape_str(it->second.shape()) +
                         ", expected " + shape_str(t.shape()));
    }
    t = it->second;
    ++next;
  });
  if (next != assignments.size()) {
    throw format_error("checkpoint '" + path + "' params list has " +
                       std::to_string(assignments.size()) +
                       " entries, model has " + std::to_string(next));
  }
  return model;
}

}  // namespace scalenet
