// SPDX-License-Identifier: Apache-2.0
/**
 * @file   config.cpp
 * @brief  INI binding for LabConfig.
 */

#include <dfq/config.hpp>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <sstream>

namespace dfq {

namespace {

namespace pt = boost::property_tree;

[[noreturn]] void bad(const std::string &key, const std::string &why) {
  throw ConfigError(key, why);
}

template <typename T> T parse_number(const std::string &key, std::string_view s) {
  T v{};
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size())
    bad(key, "'" + std::string(s) + "' is not a valid number");
  return v;
}

std::string format_double(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

bool parse_bool(const std::string &key, std::string_view s) {
  if (s == "true" || s == "1")
    return true;
  if (s == "false" || s == "0")
    return false;
  bad(key, "'" + std::string(s) + "' is not a boolean (true/false)");
}

std::vector<std::string> split_list(std::string_view s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != ' ') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

struct Field {
  std::string key; // section.name
  std::function<std::string(const LabConfig &)> get;
  std::function<void(LabConfig &, const std::string &key, const std::string &)>
      set;
};

template <typename T, typename Acc> Field integral(std::string key, Acc acc) {
  return {std::move(key),
          [acc](const LabConfig &c) {
            return std::to_string(acc(const_cast<LabConfig &>(c)));
          },
          [acc](LabConfig &c, const std::string &k, const std::string &v) {
            acc(c) = parse_number<T>(k, v);
          }};
}

template <typename Acc> Field real(std::string key, Acc acc) {
  return {std::move(key),
          [acc](const LabConfig &c) {
            return format_double(acc(const_cast<LabConfig &>(c)));
          },
          [acc](LabConfig &c, const std::string &k, const std::string &v) {
            const double d = parse_number<double>(k, v);
            if (!std::isfinite(d))
              bad(k, "must be finite");
            acc(c) = d;
          }};
}

template <typename Acc> Field boolean(std::string key, Acc acc) {
  return {std::move(key),
          [acc](const LabConfig &c) {
            return std::string(acc(const_cast<LabConfig &>(c)) ? "true"
                                                                : "false");
          },
          [acc](LabConfig &c, const std::string &k, const std::string &v) {
            acc(c) = parse_bool(k, v);
          }};
}

/// Enum-like values parsed by a throwing parser.
template <typename Acc, typename Parse, typename Show>
Field named(std::string key, Acc acc, Parse parse, Show show) {
  return {std::move(key),
          [acc, show](const LabConfig &c) {
            return show(acc(const_cast<LabConfig &>(c)));
          },
          [acc, parse](LabConfig &c, const std::string &k, const std::string &v) {
            try {
              acc(c) = parse(v);
            } catch (const std::invalid_argument &e) {
              bad(k, e.what());
            }
          }};
}

#define ACC(expr) [](LabConfig &c) -> auto & { return c.expr; }

const std::vector<Field> &fields() {
  static const std::vector<Field> f = [] {
    std::vector<Field> v;
    v.push_back(integral<std::uint64_t>("lab.seed", ACC(seed)));
    v.push_back(integral<std::size_t>("lab.select_images", ACC(select_images)));

    v.push_back(integral<std::size_t>("data.samples", ACC(data.samples)));
    v.push_back(integral<std::size_t>("data.classes", ACC(data.classes)));
    v.push_back(integral<std::size_t>("data.side", ACC(data.side)));
    v.push_back(real("data.noise", ACC(data.noise)));
    v.push_back(real("data.train_fraction", ACC(data.train_fraction)));
    v.push_back(integral<std::uint64_t>("data.seed", ACC(data.seed)));
    v.push_back(boolean("data.standardize", ACC(data.standardize)));

    v.push_back(integral<std::size_t>("vit.image_side", ACC(vit.image_side)));
    v.push_back(integral<std::size_t>("vit.patch_side", ACC(vit.patch_side)));
    v.push_back(integral<std::size_t>("vit.channels", ACC(vit.channels)));
    v.push_back(integral<std::size_t>("vit.embed_dim", ACC(vit.embed_dim)));
    v.push_back(integral<std::size_t>("vit.layers", ACC(vit.layers)));
    v.push_back(integral<std::size_t>("vit.heads", ACC(vit.heads)));
    v.push_back(real("vit.mlp_ratio", ACC(vit.mlp_ratio)));
    v.push_back(integral<std::size_t>("vit.classes", ACC(vit.classes)));
    v.push_back(boolean("vit.use_class_token", ACC(vit.use_class_token)));

    v.push_back(real("teacher.lr", ACC(teacher.lr)));
    v.push_back(real("teacher.weight_decay", ACC(teacher.weight_decay)));
    v.push_back(integral<std::size_t>("teacher.epochs", ACC(teacher.epochs)));
    v.push_back(integral<std::size_t>("teacher.batch", ACC(teacher.batch)));
    v.push_back(real("teacher.warmup_fraction", ACC(teacher.warmup_fraction)));
    v.push_back(integral<std::uint64_t>("teacher.seed", ACC(teacher.seed)));

    v.push_back(integral<std::size_t>("synth.samples_total", ACC(synth.samples_total)));
    v.push_back(integral<std::size_t>("synth.batch", ACC(synth.batch)));
    v.push_back(integral<std::size_t>("synth.steps_per_batch", ACC(synth.steps_per_batch)));
    v.push_back(real("synth.alpha", ACC(synth.alpha)));
    v.push_back(real("synth.beta", ACC(synth.beta)));
    v.push_back(real("synth.lr", ACC(synth.lr)));
    v.push_back(real("synth.beta1", ACC(synth.beta1)));
    v.push_back(real("synth.beta2", ACC(synth.beta2)));
    v.push_back(boolean("synth.use_ihc", ACC(synth.use_ihc)));
    v.push_back(boolean("synth.post_softmax", ACC(synth.post_softmax)));
    v.push_back(integral<std::size_t>("synth.trace_every", ACC(synth.trace_every)));
    v.push_back(integral<std::uint64_t>("synth.seed", ACC(synth.seed)));

    v.push_back(real("distill.gamma", ACC(distill.gamma)));
    v.push_back(named("distill.metric", ACC(distill.metric), parse_metric,
                      [](Metric m) { return to_string(m); }));
    v.push_back(named("distill.target", ACC(distill.had_target),
                      parse_had_target, [](HadTarget t) { return to_string(t); }));
    v.push_back(integral<std::size_t>("distill.epochs", ACC(distill.epochs)));
    v.push_back(integral<std::size_t>("distill.batch", ACC(distill.batch)));
    v.push_back(real("distill.lr", ACC(distill.lr)));
    v.push_back(real("distill.momentum", ACC(distill.momentum)));
    v.push_back(real("distill.weight_decay", ACC(distill.weight_decay)));
    v.push_back(named("distill.quant", ACC(distill.bits), parse_bit_setting,
                      [](const BitSetting &b) { return b.label(); }));
    v.push_back(named("distill.quant_mode", ACC(distill.mode), parse_quant_mode,
                      [](QuantMode m) { return to_string(m); }));
    v.push_back(named("distill.augmentation", ACC(distill.augmentation),
                      parse_augmentation,
                      [](Augmentation a) { return to_string(a); }));
    v.push_back(integral<std::uint64_t>("distill.seed", ACC(distill.seed)));

    v.push_back(integral<std::size_t>("corr.n_configs", ACC(corr.n_configs)));
    v.push_back(integral<std::uint64_t>("corr.seed", ACC(corr.seed)));
    v.push_back(named("corr.quant", ACC(corr.bits), parse_bit_setting,
                      [](const BitSetting &b) { return b.label(); }));
    v.push_back(named("corr.quant_mode", ACC(corr.mode), parse_quant_mode,
                      [](QuantMode m) { return to_string(m); }));
    v.push_back(integral<std::size_t>("corr.calibration_images",
                                      ACC(corr.calibration_images)));
    v.push_back(named(
        "corr.metrics", ACC(corr.metrics),
        [](const std::string &s) {
          std::vector<Metric> out;
          for (const auto &p : split_list(s))
            out.push_back(parse_metric(p));
          return out;
        },
        [](const std::vector<Metric> &ms) {
          std::string s;
          for (std::size_t i = 0; i < ms.size(); ++i)
            s += (i ? "," : "") + to_string(ms[i]);
          return s;
        }));

    v.push_back(real("motiv.fraction", ACC(motiv.fraction)));
    v.push_back(integral<std::size_t>("motiv.seeds", ACC(motiv.seeds)));
    v.push_back(integral<std::size_t>("motiv.pool", ACC(motiv.pool)));

    v.push_back(named(
        "sweep.bits", ACC(sweep.bits),
        [](const std::string &s) {
          std::vector<int> out;
          for (const auto &p : split_list(s)) {
            int k = 0;
            auto [ptr, ec] = std::from_chars(p.data(), p.data() + p.size(), k);
            if (ec != std::errc() || ptr != p.data() + p.size() || k < 2 ||
                k > 8)
              throw std::invalid_argument("'" + p + "' is not a bit width in "
                                                    "[2, 8]");
            out.push_back(k);
          }
          return out;
        },
        [](const std::vector<int> &bits) {
          std::string s;
          for (std::size_t i = 0; i < bits.size(); ++i)
            s += (i ? "," : "") + std::to_string(bits[i]);
          return s;
        }));
    v.push_back(integral<std::size_t>("sweep.seeds", ACC(sweep.seeds)));
    return v;
  }();
  return f;
}

#undef ACC

const Field *find_field(std::string_view key) {
  for (const auto &f : fields())
    if (f.key == key)
      return &f;
  return nullptr;
}

void validate(const LabConfig &c) {
  auto check = [](const char *section, auto &&fn) {
    try {
      fn();
    } catch (const std::invalid_argument &e) {
      throw ConfigError(section, e.what());
    }
  };
  check("data", [&] { c.data.validate(); });
  check("vit", [&] { c.vit.validate(); });
  check("synth", [&] { c.synth.validate(); });
  check("distill", [&] { c.distill.validate(); });
  if (c.vit.classes != c.data.classes)
    throw ConfigError("vit.classes", "must equal data.classes (" +
                                         std::to_string(c.data.classes) + ")");
  if (c.vit.image_side != c.data.side)
    throw ConfigError("vit.image_side", "must equal data.side (" +
                                            std::to_string(c.data.side) + ")");
  if (c.vit.channels != 1)
    throw ConfigError("vit.channels", "toy shapes are single-channel");
  if (!(c.motiv.fraction > 0.0 && c.motiv.fraction <= 0.5))
    throw ConfigError("motiv.fraction", "must be in (0, 0.5]");
  if (c.motiv.seeds == 0)
    throw ConfigError("motiv.seeds", "must be >= 1");
  if (c.sweep.bits.empty())
    throw ConfigError("sweep.bits", "must list at least one bit width");
  if (c.sweep.seeds == 0)
    throw ConfigError("sweep.seeds", "must be >= 1");
  if (c.corr.metrics.empty())
    throw ConfigError("corr.metrics", "must list at least one metric");
}

} // namespace

void LabConfig::reseed(std::uint64_t s) {
  seed = s;
  Rng rng(s);
  data.seed = rng.next_u64();
  teacher.seed = rng.next_u64();
  synth.seed = rng.next_u64();
  distill.seed = rng.next_u64();
  corr.seed = s;
}

LabConfig default_lab_config() {
  LabConfig c;
  c.data.samples = 8000;
  c.teacher.epochs = 12;
  c.teacher.batch = 64;
  c.synth.samples_total = 512;
  c.synth.batch = 32;
  c.synth.steps_per_batch = 200;
  c.distill.epochs = 10;
  c.distill.batch = 16;
  c.select_images = 512;
  c.reseed(0);
  return c;
}

LabConfig parse_config(std::string_view ini, LabConfig base) {
  pt::ptree tree;
  std::istringstream in{std::string(ini)};
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error &e) {
    throw ConfigError("<syntax, line " + std::to_string(e.line()) + ">",
                      e.message());
  }
  for (const auto &[section, body] : tree) {
    if (body.empty() && !body.data().empty())
      throw ConfigError(section, "keys must live inside a [section]");
  }
  // The global seed first: explicit component seeds override its derivation.
  if (auto s = tree.get_optional<std::string>("lab.seed"))
    base.reseed(parse_number<std::uint64_t>("lab.seed", *s));
  for (const auto &[section, body] : tree)
    for (const auto &[name, value] : body) {
      const std::string key = section + "." + name;
      const Field *f = find_field(key);
      if (!f)
        throw ConfigError(key, "unknown key");
      if (key == "lab.seed")
        continue;
      f->set(base, key, value.data());
    }
  validate(base);
  return base;
}

LabConfig load_config(const std::filesystem::path &path, LabConfig base) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw ConfigError("<file>", "cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), std::move(base));
}

std::string to_ini(const LabConfig &c) {
  std::string out, section;
  for (const auto &f : fields()) {
    const auto dot = f.key.find('.');
    const std::string sec = f.key.substr(0, dot);
    if (sec != section) {
      out += (out.empty() ? "[" : "\n[") + sec + "]\n";
      section = sec;
    }
    out += f.key.substr(dot + 1) + " = " + f.get(c) + "\n";
  }
  return out;
}

std::string vit_to_ini(const ViTConfig &v) {
  LabConfig c;
  c.vit = v;
  std::string out = "[vit]\n";
  for (const auto &f : fields())
    if (f.key.rfind("vit.", 0) == 0)
      out += f.key.substr(4) + " = " + f.get(c) + "\n";
  return out;
}

ViTConfig vit_from_ini(std::string_view ini) {
  pt::ptree tree;
  std::istringstream in{std::string(ini)};
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error &e) {
    throw ConfigError("<vit blob>", e.message());
  }
  LabConfig c;
  for (const auto &[section, body] : tree)
    for (const auto &[name, value] : body) {
      const std::string key = section + "." + name;
      const Field *f = find_field(key);
      if (!f || section != "vit")
        throw ConfigError(key, "unknown key in model config");
      f->set(c, key, value.data());
    }
  try {
    c.vit.validate();
  } catch (const std::invalid_argument &e) {
    throw ConfigError("vit", e.what());
  }
  return c.vit;
}

} // namespace dfq
