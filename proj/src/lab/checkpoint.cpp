// SPDX-License-Identifier: Apache-2.0
/**
 * @file   checkpoint.cpp
 * @brief  Tensor container encode/decode and model (de)serialization.
 */

#include <dfq/checkpoint.hpp>
#include <dfq/config.hpp>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <json.hpp>

#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

namespace dfq {

namespace {

template <typename T> void put(std::string &out, T v) {
  static_assert(std::is_unsigned_v<T>);
  for (std::size_t i = 0; i < sizeof(T); ++i)
    out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

class Reader {
public:
  explicit Reader(std::string_view b) : bytes_(b) {}

  template <typename T> T get(const char *what) {
    need(sizeof(T), what);
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i)
      v |= static_cast<T>(static_cast<unsigned char>(bytes_[pos_ + i]))
           << (8 * i);
    pos_ += sizeof(T);
    return v;
  }

  std::string_view take(std::size_t n, const char *what) {
    need(n, what);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

private:
  void need(std::size_t n, const char *what) {
    if (bytes_.size() - pos_ < n)
      throw CheckpointError(std::string("checkpoint truncated while reading ") +
                            what);
  }
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

std::string quant_prefix(QuantTarget t, const std::string &site) {
  return std::string("quant.") + (t == QuantTarget::Weight ? "w." : "a.") + site;
}

boost::property_tree::ptree parse_blob(const std::string &blob) {
  boost::property_tree::ptree tree;
  std::istringstream in(blob);
  try {
    boost::property_tree::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error &e) {
    throw CheckpointError("checkpoint config blob: " + e.message());
  }
  return tree;
}

ViTConfig vit_of(const boost::property_tree::ptree &tree) {
  auto sub = tree.get_child_optional("vit");
  if (!sub)
    throw CheckpointError("checkpoint config blob has no [vit] section");
  boost::property_tree::ptree only;
  only.add_child("vit", *sub);
  std::ostringstream os;
  boost::property_tree::write_ini(os, only);
  try {
    return vit_from_ini(os.str());
  } catch (const ConfigError &e) {
    throw CheckpointError(std::string("checkpoint model config: ") + e.what());
  }
}

void load_weights(MicroViT &model, const Checkpoint &ck) {
  for (auto &[name, t] : model.named_parameters()) {
    const Tensor &src = ck.at(name);
    if (src.shape() != t.shape())
      throw CheckpointError("checkpoint tensor '" + name + "' has shape " +
                            to_string(src.shape()) + ", model expects " +
                            to_string(t.shape()));
    auto dst = t.mutable_data();
    std::copy(src.data().begin(), src.data().end(), dst.begin());
  }
}

} // namespace

const Tensor &Checkpoint::at(std::string_view name) const {
  for (const auto &[n, t] : tensors)
    if (n == name)
      return t;
  throw CheckpointError("checkpoint has no tensor '" + std::string(name) + "'");
}

std::string encode_checkpoint(const Checkpoint &ck) {
  std::string out(kCheckpointMagic, sizeof kCheckpointMagic);
  put<std::uint16_t>(out, kCheckpointVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(ck.tensors.size()));
  for (const auto &[name, t] : ck.tensors) {
    if (name.size() > std::numeric_limits<std::uint16_t>::max())
      throw CheckpointError("tensor name too long: " + name.substr(0, 32));
    if (t.rank() > std::numeric_limits<std::uint8_t>::max())
      throw CheckpointError("tensor '" + name + "' rank too large");
    put<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    out += name;
    put<std::uint8_t>(out, static_cast<std::uint8_t>(t.rank()));
    for (auto e : t.shape()) {
      if (e > std::numeric_limits<std::uint32_t>::max())
        throw CheckpointError("tensor '" + name + "' extent too large");
      put<std::uint32_t>(out, static_cast<std::uint32_t>(e));
    }
    for (double v : t.data())
      put<std::uint32_t>(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }
  put<std::uint32_t>(out, static_cast<std::uint32_t>(ck.config.size()));
  out += ck.config;
  return out;
}

Checkpoint decode_checkpoint(std::string_view bytes) {
  Reader r(bytes);
  if (r.take(8, "magic") != std::string_view(kCheckpointMagic, 8))
    throw CheckpointError("not a checkpoint (bad magic)");
  const auto version = r.get<std::uint16_t>("version");
  if (version != kCheckpointVersion)
    throw CheckpointError("unsupported checkpoint version " +
                          std::to_string(version));
  const auto count = r.get<std::uint32_t>("tensor count");
  Checkpoint ck;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = r.get<std::uint16_t>("name length");
    std::string name(r.take(len, "name"));
    const auto rank = r.get<std::uint8_t>("rank");
    Shape shape(rank);
    for (auto &e : shape)
      e = r.get<std::uint32_t>("extent");
    std::vector<double> values(numel(shape));
    for (auto &v : values)
      v = std::bit_cast<float>(r.get<std::uint32_t>("payload"));
    ck.tensors.emplace_back(std::move(name),
                            Tensor::from(std::move(shape), std::move(values)));
  }
  const auto clen = r.get<std::uint32_t>("config length");
  ck.config = std::string(r.take(clen, "config"));
  if (!r.done())
    throw CheckpointError("trailing bytes after checkpoint");
  return ck;
}

void save_checkpoint(const std::filesystem::path &path, const Checkpoint &ck) {
  const std::string bytes = encode_checkpoint(ck);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out)
    throw CheckpointError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out)
    throw CheckpointError("write failed for " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path &path) {
  if (!std::filesystem::exists(path))
    throw CheckpointNotFound("checkpoint not found: " + path.string());
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw CheckpointError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_checkpoint(ss.str());
}

void round_to_storage(MicroViT &model) {
  for (auto &[name, t] : model.named_parameters())
    for (double &v : t.mutable_data())
      v = static_cast<double>(static_cast<float>(v));
}

Checkpoint model_checkpoint(const MicroViT &model) {
  Checkpoint ck;
  for (const auto &[name, t] : model.named_parameters())
    ck.tensors.emplace_back(name, t.detach());
  ck.config = vit_to_ini(model.config());
  return ck;
}

MicroViT model_from_checkpoint(const Checkpoint &ck) {
  MicroViT model(vit_of(parse_blob(ck.config)), 0);
  load_weights(model, ck);
  return model;
}

Checkpoint student_checkpoint(const QuantizedViT &student) {
  Checkpoint ck = model_checkpoint(student.model());
  auto add = [&](QuantTarget target, const auto &params) {
    for (const auto &[site, p] : params) {
      const std::string pre = quant_prefix(target, site);
      ck.tensors.emplace_back(pre + ".scale", p.scale.detach());
      ck.tensors.emplace_back(pre + ".zero_point", p.zero_point.detach());
      ck.tensors.emplace_back(
          pre + ".state",
          Tensor::from({5}, {p.ema_min, p.ema_max, p.ema_initialized ? 1.0 : 0.0,
                             p.trainable ? 1.0 : 0.0, p.degenerate ? 1.0 : 0.0}));
    }
  };
  add(QuantTarget::Weight, student.weight_params());
  add(QuantTarget::Activation, student.activation_params());
  std::ostringstream os;
  os << vit_to_ini(student.model().config()) << "\n[quant]\nbits = "
     << student.bits().label() << "\nmode = " << to_string(student.mode())
     << "\nema_momentum = " << student.ema_momentum() << "\n";
  ck.config = os.str();
  return ck;
}

QuantizedViT student_from_checkpoint(const Checkpoint &ck) {
  const auto tree = parse_blob(ck.config);
  MicroViT model(vit_of(tree), 0);
  load_weights(model, ck);
  BitSetting bits;
  QuantMode mode;
  double momentum = 0.95;
  try {
    bits = parse_bit_setting(tree.get<std::string>("quant.bits"));
    mode = parse_quant_mode(tree.get<std::string>("quant.mode"));
    momentum = tree.get<double>("quant.ema_momentum", 0.95);
  } catch (const std::exception &e) {
    throw CheckpointError(std::string("checkpoint quant config: ") + e.what());
  }
  QuantizedViT q(std::move(model), bits, mode, momentum);
  for (const auto &[name, t] : ck.tensors) {
    constexpr std::string_view suffix = ".state";
    if (name.rfind("quant.", 0) != 0 || name.size() < suffix.size() ||
        name.compare(name.size() - suffix.size(), suffix.size(), suffix) != 0)
      continue;
    const std::string pre = name.substr(0, name.size() - suffix.size());
    const QuantTarget target =
        pre.compare(0, 8, "quant.w.") == 0 ? QuantTarget::Weight
                                           : QuantTarget::Activation;
    const std::string site = pre.substr(8);
    const auto s = t.data();
    if (s.size() != 5)
      throw CheckpointError("bad quantizer state for " + site);
    QuantParams p;
    p.scale = ck.at(pre + ".scale").detach();
    p.zero_point = ck.at(pre + ".zero_point").detach();
    p.ema_min = s[0];
    p.ema_max = s[1];
    p.ema_initialized = s[2] != 0.0;
    p.trainable = s[3] != 0.0;
    p.degenerate = s[4] != 0.0;
    q.restore_params(target, site, std::move(p));
  }
  return q;
}

namespace {

constexpr const char *kManifestFormat = "dfq-synth-1";

Tensor vector_tensor(const std::vector<double> &v) {
  return Tensor::from({v.size()}, v);
}

std::vector<double> to_vector(const Tensor &t) {
  return {t.data().begin(), t.data().end()};
}

std::string exact(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

std::string shard_name(std::size_t i) {
  std::string n = std::to_string(i);
  return "shard_" + std::string(n.size() < 3 ? 3 - n.size() : 0, '0') + n +
         ".ck";
}

} // namespace

void save_synth_dataset(const std::filesystem::path &dir, const SynthDataset &ds) {
  std::filesystem::create_directories(dir);
  nlohmann::ordered_json shards = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < ds.batches.size(); ++i) {
    const SynthBatch &b = ds.batches[i];
    Checkpoint ck;
    ck.tensors.emplace_back("images", b.images.detach());
    std::vector<double> labels(b.labels.begin(), b.labels.end());
    ck.tensors.emplace_back("labels", vector_tensor(labels));
    ck.tensors.emplace_back("coherency", vector_tensor(b.coherency));
    ck.tensors.emplace_back("final_cl", vector_tensor(b.final_cl));
    ck.tensors.emplace_back("final_tv", vector_tensor(b.final_tv));
    ck.tensors.emplace_back("loss_trace", vector_tensor(b.loss_trace));
    // Scalars that must survive exactly live in the text blob.
    ck.config = "[shard]\nseed = " + std::to_string(b.seed) +
                "\nrestarts = " + std::to_string(b.restarts) +
                "\nfinal_ihc = " + exact(b.final_ihc) + "\n";
    save_checkpoint(dir / shard_name(i), ck);
    shards.push_back({{"file", shard_name(i)},
                      {"images", b.labels.size()},
                      {"seed", b.seed},
                      {"restarts", b.restarts}});
  }
  nlohmann::ordered_json manifest = {{"format", kManifestFormat},
                                     {"samples", ds.size()},
                                     {"shards", shards}};
  std::ofstream out(dir / "manifest.json", std::ios::binary | std::ios::trunc);
  if (!out)
    throw CheckpointError("cannot write " + (dir / "manifest.json").string());
  out << manifest.dump(2) << "\n";
}

SynthDataset load_synth_dataset(const std::filesystem::path &dir) {
  const auto path = dir / "manifest.json";
  if (!std::filesystem::exists(path))
    throw CheckpointNotFound("synthetic set manifest not found: " + path.string());
  nlohmann::json manifest;
  try {
    std::ifstream in(path, std::ios::binary);
    manifest = nlohmann::json::parse(in);
    if (manifest.at("format").get<std::string>() != kManifestFormat)
      throw CheckpointError("unsupported synthetic set format in " +
                            path.string());
  } catch (const nlohmann::json::exception &e) {
    throw CheckpointError("bad manifest " + path.string() + ": " + e.what());
  }
  SynthDataset ds;
  for (const auto &entry : manifest.at("shards")) {
    const Checkpoint ck = load_checkpoint(dir / entry.at("file").get<std::string>());
    const auto blob = parse_blob(ck.config);
    SynthBatch b;
    b.images = ck.at("images");
    for (double v : ck.at("labels").data())
      b.labels.push_back(static_cast<int>(v));
    b.coherency = to_vector(ck.at("coherency"));
    b.final_cl = to_vector(ck.at("final_cl"));
    b.final_tv = to_vector(ck.at("final_tv"));
    b.loss_trace = to_vector(ck.at("loss_trace"));
    try {
      b.seed = blob.get<std::uint64_t>("shard.seed");
      b.restarts = blob.get<std::size_t>("shard.restarts");
      b.final_ihc = blob.get<double>("shard.final_ihc");
    } catch (const std::exception &e) {
      throw CheckpointError("bad shard header: " + std::string(e.what()));
    }
    if (b.images.rank() != 4 || b.images.dim(0) != b.labels.size())
      throw CheckpointError("shard images and labels disagree");
    ds.batches.push_back(std::move(b));
  }
  return ds;
}

} // namespace dfq
