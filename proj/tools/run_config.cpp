#include "run_config.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <type_traits>

namespace pgd::cli {

using nlohmann::json;

namespace {

// Reads the keys of one JSON object, remembering which were consumed so that
// anything left over can be rejected by name.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
  }

  template <class T>
  void get(const char* key, T& out) {
    if (!j_.contains(key)) return;
    seen_.insert(key);
    const json& v = j_.at(key);
    const std::string field = path_ + "." + key;
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(field + ": expected true or false");
      out = v.get<bool>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw ConfigError(field + ": expected an integer");
      if constexpr (std::is_unsigned_v<T>) {
        if (v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0) {
          throw ConfigError(field + ": must be >= 0");
        }
      }
      out = v.get<T>();
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError(field + ": expected a number");
      out = v.get<T>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError(field + ": expected a string");
      out = v.get<std::string>();
    } else {
      // Arrays of a scalar type.
      if (!v.is_array()) throw ConfigError(field + ": expected an array");
      out.clear();
      for (const auto& e : v) {
        using E = typename T::value_type;
        if constexpr (std::is_integral_v<E>) {
          if (!e.is_number_integer()) throw ConfigError(field + ": expected integers");
          if constexpr (std::is_unsigned_v<E>) {
            if (!e.is_number_unsigned()) throw ConfigError(field + ": must be >= 0");
          }
        } else if constexpr (std::is_floating_point_v<E>) {
          if (!e.is_number()) throw ConfigError(field + ": expected numbers");
        } else {
          if (!e.is_string()) throw ConfigError(field + ": expected strings");
        }
        out.push_back(e.get<E>());
      }
    }
  }

  const json* child(const char* key) {
    if (!j_.contains(key)) return nullptr;
    seen_.insert(key);
    return &j_.at(key);
  }

  void finish() const {
    for (const auto& [key, _] : j_.items()) {
      if (!seen_.count(key)) throw ConfigError("unknown key '" + path_ + "." + key + "'");
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

const std::vector<std::string> kVariants{"no_localization", "plain_conv", "coordconv", "coordpool", "full"};
const std::vector<std::string> kLosses{"FL", "NSFL", "FL+Dice", "NSFL+Dice"};

bool contains(const std::vector<std::string>& v, const std::string& s) {
  return std::find(v.begin(), v.end(), s) != v.end();
}

}  // namespace

DType parse_dtype(const std::string& text) {
  if (text == "f32") return DType::f32;
  if (text == "f64") return DType::f64;
  throw ConfigError("train.dtype: expected f32 or f64, got '" + text + "'");
}

void RunConfig::validate() const {
  network.validate();
  train.validate();
  data.validate();
  if (split.folds < 2) throw ConfigError("split.folds: must be >= 2");
  if (split.fold >= split.folds) throw ConfigError("split.fold: must be < split.folds");
  if (ablate.epochs < 0) throw ConfigError("ablate.epochs: must be >= 0");
  if (ablate.seeds.empty()) throw ConfigError("ablate.seeds: must not be empty");
  for (const auto& v : ablate.variants) {
    if (!contains(kVariants, v)) throw ConfigError("ablate.variants: unknown variant '" + v + "'");
  }
  for (const auto& l : ablate.losses) {
    if (!contains(kLosses, l)) throw ConfigError("ablate.losses: unknown loss '" + l + "'");
  }
}

std::int64_t RunConfig::ablation_epochs() const {
  return ablate.epochs > 0 ? ablate.epochs : (train.epochs + 2) / 3;
}

RunConfig toy_profile() {
  RunConfig c;
  c.train.learning_rate = 1e-3;
  return c;
}

RunConfig parse_run_config(const json& j) {
  RunConfig c;
  Section root(j, "config");
  if (const json* n = root.child("network")) {
    Section s(*n, "network");
    auto& v = c.network;
    s.get("in_channels", v.in_channels);
    s.get("num_classes", v.num_classes);
    s.get("base_channels", v.base_channels);
    s.get("depth", v.depth);
    s.get("deformable_blocks", v.deformable_blocks);
    s.get("localization_dilations", v.localization_dilations);
    s.get("localization_channels", v.localization_channels);
    s.get("aspp_rates", v.aspp_rates);
    s.get("use_localization_path", v.use_localization_path);
    s.get("use_add_coord", v.use_add_coord);
    s.get("use_coord_pool", v.use_coord_pool);
    s.get("plain_conv_path", v.plain_conv_path);
    s.finish();
  }
  if (const json* t = root.child("train")) {
    Section s(*t, "train");
    auto& v = c.train;
    s.get("learning_rate", v.learning_rate);
    s.get("batch_size", v.batch_size);
    s.get("epochs", v.epochs);
    s.get("seed", v.seed);
    s.get("min_epochs_before_switch", v.min_epochs_before_switch);
    s.get("grad_clip", v.grad_clip);
    std::string dtype = to_string(v.dtype);
    s.get("dtype", dtype);
    v.dtype = parse_dtype(dtype);
    if (const json* a = s.child("adam")) {
      Section as(*a, "train.adam");
      as.get("beta1", v.adam.beta1);
      as.get("beta2", v.adam.beta2);
      as.get("eps", v.adam.eps);
      as.finish();
    }
    s.finish();
  }
  if (const json* d = root.child("data")) {
    Section s(*d, "data");
    auto& v = c.data;
    s.get("height", v.height);
    s.get("width", v.width);
    s.get("tumor_fraction_min", v.tumor_fraction_min);
    s.get("tumor_fraction_max", v.tumor_fraction_max);
    s.get("noise_rate", v.noise_rate);
    std::string kind = to_string(v.noise_kind);
    s.get("noise_kind", kind);
    v.noise_kind = parse_noise_kind(kind);
    s.get("seed", v.seed);
    s.finish();
  }
  if (const json* l = root.child("loss")) {
    Section s(*l, "loss");
    auto& v = c.train.loss;
    s.get("gamma", v.gamma);
    s.get("beta", v.beta);
    s.get("epsilon", v.epsilon);
    s.get("lambda", v.lambda);
    s.get("class_weights", v.class_weights);
    s.get("switch_threshold", v.switch_threshold);
    s.get("dice_smooth", v.dice_smooth);
    s.get("noise_suppression", v.noise_suppression);
    s.finish();
  }
  if (const json* sp = root.child("split")) {
    Section s(*sp, "split");
    s.get("folds", c.split.folds);
    s.get("fold", c.split.fold);
    s.get("seed", c.split.seed);
    s.finish();
  }
  if (const json* a = root.child("ablate")) {
    Section s(*a, "ablate");
    s.get("epochs", c.ablate.epochs);
    s.get("seeds", c.ablate.seeds);
    s.get("variants", c.ablate.variants);
    s.get("losses", c.ablate.losses);
    s.finish();
  }
  root.finish();
  c.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  return parse_run_config(j);
}

json to_json(const RunConfig& c) {
  const auto& n = c.network;
  const auto& t = c.train;
  const auto& d = c.data;
  const auto& l = c.train.loss;
  return json{
      {"network",
       {{"in_channels", n.in_channels},
        {"num_classes", n.num_classes},
        {"base_channels", n.base_channels},
        {"depth", n.depth},
        {"deformable_blocks", n.deformable_blocks},
        {"localization_dilations", n.localization_dilations},
        {"localization_channels", n.localization_channels},
        {"aspp_rates", n.aspp_rates},
        {"use_localization_path", n.use_localization_path},
        {"use_add_coord", n.use_add_coord},
        {"use_coord_pool", n.use_coord_pool},
        {"plain_conv_path", n.plain_conv_path}}},
      {"train",
       {{"learning_rate", t.learning_rate},
        {"batch_size", t.batch_size},
        {"epochs", t.epochs},
        {"seed", t.seed},
        {"min_epochs_before_switch", t.min_epochs_before_switch},
        {"grad_clip", t.grad_clip},
        {"dtype", to_string(t.dtype)},
        {"adam", {{"beta1", t.adam.beta1}, {"beta2", t.adam.beta2}, {"eps", t.adam.eps}}}}},
      {"data",
       {{"height", d.height},
        {"width", d.width},
        {"tumor_fraction_min", d.tumor_fraction_min},
        {"tumor_fraction_max", d.tumor_fraction_max},
        {"noise_rate", d.noise_rate},
        {"noise_kind", to_string(d.noise_kind)},
        {"seed", d.seed}}},
      {"loss",
       {{"gamma", l.gamma},
        {"beta", l.beta},
        {"epsilon", l.epsilon},
        {"lambda", l.lambda},
        {"class_weights", l.class_weights},
        {"switch_threshold", l.switch_threshold},
        {"dice_smooth", l.dice_smooth},
        {"noise_suppression", l.noise_suppression}}},
      {"split", {{"folds", c.split.folds}, {"fold", c.split.fold}, {"seed", c.split.seed}}},
      {"ablate",
       {{"epochs", c.ablate.epochs},
        {"seeds", c.ablate.seeds},
        {"variants", c.ablate.variants},
        {"losses", c.ablate.losses}}},
  };
}

NetworkConfig ablation_variant(const NetworkConfig& base, const std::string& name) {
  NetworkConfig n = base;
  n.use_localization_path = true;
  n.plain_conv_path = false;
  n.use_add_coord = false;
  n.use_coord_pool = false;
  if (name == "no_localization") {
    n.use_localization_path = false;
  } else if (name == "plain_conv") {
    n.plain_conv_path = true;
  } else if (name == "coordconv") {
    n.use_add_coord = true;
  } else if (name == "coordpool") {
    n.use_coord_pool = true;
  } else if (name == "full") {
    n.use_add_coord = true;
    n.use_coord_pool = true;
  } else {
    throw ConfigError("ablate.variants: unknown variant '" + name + "'");
  }
  return n;
}

LossConfig loss_variant(const LossConfig& base, const std::string& name) {
  LossConfig l = base;
  if (name == "FL" || name == "NSFL") l.lambda = 1.0;
  else if (name != "FL+Dice" && name != "NSFL+Dice") throw ConfigError("ablate.losses: unknown loss '" + name + "'");
  l.noise_suppression = name.rfind("NSFL", 0) == 0;
  return l;
}

}  // namespace pgd::cli
