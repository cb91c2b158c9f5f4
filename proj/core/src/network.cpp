#include "pgd/network.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "pgd/coord.hpp"
#include "pgd/deform.hpp"
#include "pgd/ops.hpp"
#include "pgd/pgdt.hpp"
#include "pgd/random.hpp"

namespace pgd {

namespace {

using random::hash;

std::string join(const std::vector<std::int64_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ',';
    s += std::to_string(v[i]);
  }
  return s;
}

std::vector<std::int64_t> split_ints(const std::string& s) {
  std::vector<std::int64_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(std::stoll(item));
  }
  return out;
}

class Builder {
 public:
  Builder(ModelState& state, std::uint64_t seed, DType dtype) : state_(state), seed_(seed), dtype_(dtype) {}

  void conv(const std::string& name, std::int64_t in, std::int64_t out, std::int64_t k, bool zero = false) {
    Tensor w = Tensor::zeros({out, in, k, k}, dtype_);
    if (!zero) {
      random::Rng rng(random::mix(seed_, hash(name)));
      const double scale = std::sqrt(2.0 / static_cast<double>(in * k * k));
      for (std::int64_t i = 0; i < w.numel(); ++i) w.set(i, scale * rng.normal());
    }
    w.set_requires_grad(true);
    Tensor b = Tensor::zeros({out}, dtype_);
    b.set_requires_grad(true);
    state_.params[name + ".weight"] = w;
    state_.params[name + ".bias"] = b;
  }

 private:
  ModelState& state_;
  std::uint64_t seed_;
  DType dtype_;
};

ConvSpec layer(const ModelState& s, const std::string& name, std::int64_t stride = 1, std::int64_t dilation = 1) {
  ConvSpec spec;
  spec.weight = s.param(name + ".weight");
  spec.bias = s.param(name + ".bias");
  spec.out_channels = spec.weight.dim(0);
  spec.in_channels = spec.weight.dim(1);
  spec.kernel_h = spec.weight.dim(2);
  spec.kernel_w = spec.weight.dim(3);
  spec.stride = stride;
  spec.dilation = dilation;
  spec.padding = dilation * (spec.kernel_h - 1) / 2;
  return spec;
}

Tensor norm_relu(const Tensor& x) { return ops::relu(ops::instance_norm(x)); }

// conv-norm-relu twice; the first conv is deformable when the block has an
// offset branch, which reads the block input concatenated with the guide.
Tensor conv_block(const ModelState& s, const std::string& prefix, const Tensor& x, const Tensor& guide) {
  Tensor h;
  if (s.has(prefix + ".offset.weight")) {
    const Tensor branch_in = guide.defined() ? ops::concat_channels({x, guide}) : x;
    const DeformField field = offset_mask_branch(branch_in, layer(s, prefix + ".offset"));
    h = deform_conv2d(x, field, layer(s, prefix + ".conv1"));
  } else {
    h = conv2d(x, layer(s, prefix + ".conv1"));
  }
  h = norm_relu(h);
  return norm_relu(conv2d(h, layer(s, prefix + ".conv2")));
}

std::string block_name(const char* path, std::int64_t i) { return std::string(path) + std::to_string(i); }

// Layer k of the localization path: stride-2 dilated conv, then the
// CoordPool coordinates of block k-1 are appended when the path takes them.
Tensor localization_layer(const ModelState& s, std::int64_t k, const Tensor& in, const Tensor& coords) {
  const std::int64_t rate = s.config.localization_dilations[static_cast<std::size_t>(k - 1)];
  Tensor h = norm_relu(conv2d(in, layer(s, block_name("loc", k) + ".conv", 2, rate)));
  if (!coords.defined()) return h;
  if (coords.dim(2) != h.dim(2) || coords.dim(3) != h.dim(3)) {
    throw ShapeError("localization path: guide for block " + std::to_string(k) + " has extent " +
                     std::to_string(h.dim(2)) + "x" + std::to_string(h.dim(3)) + " but block " +
                     std::to_string(k - 1) + " coordinates are " + std::to_string(coords.dim(2)) + "x" +
                     std::to_string(coords.dim(3)));
  }
  return ops::concat_channels({h, coords});
}

std::int64_t encoder_in(const NetworkConfig& c, std::int64_t i) { return i == 0 ? c.in_channels : c.channels(i - 1); }

std::int64_t decoder_in(const NetworkConfig& c, std::int64_t i) {
  const std::int64_t below = c.channels(std::min(i + 1, c.depth - 1));
  return below + (c.use_coord_pool ? 2 * c.channels(i) : 0) + c.channels(i);
}

}  // namespace

NetworkConfig NetworkConfig::plain_unet() {
  NetworkConfig c;
  c.deformable_blocks.clear();
  c.use_localization_path = false;
  c.use_add_coord = false;
  c.use_coord_pool = false;
  return c;
}

void NetworkConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& why) {
    throw ConfigError("network." + field + ": " + why);
  };
  if (in_channels < 1) fail("in_channels", "must be >= 1");
  if (num_classes < 2) fail("num_classes", "must be >= 2");
  if (base_channels < 1) fail("base_channels", "must be >= 1");
  if (depth < 1 || depth > 8) fail("depth", "must be in [1, 8]");
  if (!deformable_blocks.empty() && depth < 3) fail("depth", "must be >= 3 when deformable blocks are enabled");
  for (auto b : deformable_blocks) {
    if (b < 0 || b >= depth) {
      fail("deformable_blocks", "block index " + std::to_string(b) + " outside [0, " + std::to_string(depth) + ")");
    }
  }
  if (use_localization_path && localization_dilations.empty()) fail("localization_dilations", "must not be empty");
  for (auto d : localization_dilations) {
    if (d < 1) fail("localization_dilations", "rates must be >= 1");
  }
  if (localization_channels < 1) fail("localization_channels", "must be >= 1");
  if (aspp_rates.empty()) fail("aspp_rates", "must not be empty");
  for (auto r : aspp_rates) {
    if (r < 1) fail("aspp_rates", "rates must be >= 1");
  }
}

bool NetworkConfig::is_deformable(std::int64_t block) const {
  return std::find(deformable_blocks.begin(), deformable_blocks.end(), block) != deformable_blocks.end();
}

std::int64_t NetworkConfig::localization_layers() const {
  if (!use_localization_path) return 0;
  return std::min<std::int64_t>(static_cast<std::int64_t>(localization_dilations.size()), depth - 1);
}

bool NetworkConfig::has_guide(std::int64_t block) const { return block >= 1 && block <= localization_layers(); }

std::int64_t NetworkConfig::guide_channels(std::int64_t block) const {
  if (!has_guide(block)) return 0;
  return localization_channels + (path_coords() ? 2 * channels(block - 1) : 0);
}

std::string NetworkConfig::canonical() const {
  std::ostringstream os;
  os << "in_channels=" << in_channels << '\n'
     << "num_classes=" << num_classes << '\n'
     << "base_channels=" << base_channels << '\n'
     << "depth=" << depth << '\n'
     << "deformable_blocks=" << join(deformable_blocks) << '\n'
     << "localization_dilations=" << join(localization_dilations) << '\n'
     << "localization_channels=" << localization_channels << '\n'
     << "aspp_rates=" << join(aspp_rates) << '\n'
     << "use_localization_path=" << use_localization_path << '\n'
     << "use_add_coord=" << use_add_coord << '\n'
     << "use_coord_pool=" << use_coord_pool << '\n'
     << "plain_conv_path=" << plain_conv_path << '\n';
  return os.str();
}

NetworkConfig NetworkConfig::parse_canonical(const std::string& text) {
  NetworkConfig c;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw CompatibilityError("malformed config line '" + line + "'");
    const std::string key = line.substr(0, eq);
    const std::string value = line.substr(eq + 1);
    try {
      if (key == "in_channels") c.in_channels = std::stoll(value);
      else if (key == "num_classes") c.num_classes = std::stoll(value);
      else if (key == "base_channels") c.base_channels = std::stoll(value);
      else if (key == "depth") c.depth = std::stoll(value);
      else if (key == "deformable_blocks") c.deformable_blocks = split_ints(value);
      else if (key == "localization_dilations") c.localization_dilations = split_ints(value);
      else if (key == "localization_channels") c.localization_channels = std::stoll(value);
      else if (key == "aspp_rates") c.aspp_rates = split_ints(value);
      else if (key == "use_localization_path") c.use_localization_path = value == "1";
      else if (key == "use_add_coord") c.use_add_coord = value == "1";
      else if (key == "use_coord_pool") c.use_coord_pool = value == "1";
      else if (key == "plain_conv_path") c.plain_conv_path = value == "1";
      else throw CompatibilityError("unknown config key '" + key + "'");
    } catch (const std::logic_error&) {
      throw CompatibilityError("bad value for config key '" + key + "'");
    }
  }
  return c;
}

std::uint64_t NetworkConfig::fingerprint() const { return hash(canonical()); }

std::string fingerprint_hex(std::uint64_t fingerprint) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fingerprint));
  return buf;
}

const Tensor& ModelState::param(const std::string& name) const {
  auto it = params.find(name);
  if (it == params.end()) throw Error("model has no parameter '" + name + "'");
  return it->second;
}

std::int64_t ModelState::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& [_, t] : params) n += t.numel();
  return n;
}

DType ModelState::dtype() const { return params.empty() ? DType::f64 : params.begin()->second.dtype(); }

ModelState ModelState::clone() const { return to(dtype()); }

ModelState ModelState::to(DType target) const {
  ModelState out;
  out.config = config;
  for (const auto& [name, t] : params) {
    Tensor c = t.to(target);
    c.set_requires_grad(t.requires_grad());
    out.params.emplace(name, c);
  }
  return out;
}

void ModelState::zero_grad() {
  for (auto& [_, t] : params) t.zero_grad();
}

ModelState build(const NetworkConfig& cfg, std::uint64_t seed, DType dtype) {
  cfg.validate();
  ModelState s;
  s.config = cfg;
  Builder b(s, seed, dtype);
  const std::int64_t N = 9;
  for (std::int64_t i = 0; i < cfg.depth; ++i) {
    const std::string p = block_name("enc", i);
    b.conv(p + ".conv1", encoder_in(cfg, i), cfg.channels(i), 3);
    b.conv(p + ".conv2", cfg.channels(i), cfg.channels(i), 3);
    if (cfg.is_deformable(i)) b.conv(p + ".offset", encoder_in(cfg, i) + cfg.guide_channels(i), 3 * N, 3, true);
  }
  for (std::int64_t k = 1; k <= cfg.localization_layers(); ++k) {
    const std::int64_t in = k == 1 ? cfg.channels(0) + (cfg.path_add_coord() ? 2 : 0) : cfg.guide_channels(k - 1);
    b.conv(block_name("loc", k) + ".conv", in, cfg.localization_channels, 3);
  }
  const std::int64_t width = cfg.channels(cfg.depth - 1);
  for (std::size_t j = 0; j < cfg.aspp_rates.size(); ++j) b.conv("aspp.branch" + std::to_string(j), width, width, 3);
  b.conv("aspp.pool", width, width, 1);
  b.conv("aspp.fuse", width * static_cast<std::int64_t>(cfg.aspp_rates.size() + 1), width, 1);
  for (std::int64_t i = cfg.depth - 1; i >= 0; --i) {
    const std::string p = block_name("dec", i);
    b.conv(p + ".conv1", decoder_in(cfg, i), cfg.channels(i), 3);
    b.conv(p + ".conv2", cfg.channels(i), cfg.channels(i), 3);
    if (cfg.is_deformable(i)) b.conv(p + ".offset", decoder_in(cfg, i) + cfg.guide_channels(i), 3 * N, 3, true);
  }
  b.conv("head", cfg.channels(0), cfg.num_classes, 1);
  return s;
}

std::vector<Tensor> localization_path(const ModelState& state, const Tensor& first_block_features,
                                      const std::vector<Tensor>& block_coords) {
  const NetworkConfig& cfg = state.config;
  if (!cfg.use_localization_path) throw ConfigError("localization path is disabled in this network");
  std::vector<Tensor> guides;
  Tensor h = cfg.path_add_coord() ? add_coord(first_block_features) : first_block_features;
  for (std::int64_t k = 1; k <= cfg.localization_layers(); ++k) {
    if (cfg.path_coords() && static_cast<std::int64_t>(block_coords.size()) < k) {
      throw ShapeError("localization path: missing CoordPool coordinates of block " + std::to_string(k - 1));
    }
    h = localization_layer(state, k, h, cfg.path_coords() ? block_coords[static_cast<std::size_t>(k - 1)] : Tensor());
    guides.push_back(h);
  }
  return guides;
}

Tensor aspp(const ModelState& state, const Tensor& x) {
  const NetworkConfig& cfg = state.config;
  const std::int64_t H = x.dim(2), W = x.dim(3);
  std::vector<Tensor> parts;
  for (std::size_t j = 0; j < cfg.aspp_rates.size(); ++j) {
    const std::int64_t r = cfg.aspp_rates[j];
    if (r > 1 && (r >= H || r >= W)) {
      throw ShapeError("aspp: rate " + std::to_string(r) + " is too large for a " + std::to_string(H) + "x" +
                       std::to_string(W) + " feature map");
    }
    parts.push_back(ops::relu(conv2d(x, layer(state, "aspp.branch" + std::to_string(j), 1, r))));
  }
  Tensor pooled = ops::relu(conv2d(ops::global_avg_pool(x), layer(state, "aspp.pool")));
  parts.push_back(ops::add(Tensor::zeros({x.dim(0), pooled.dim(1), H, W}, x.dtype()), pooled));
  return ops::relu(conv2d(ops::concat_channels(parts), layer(state, "aspp.fuse")));
}

Tensor forward(const ModelState& state, const Tensor& batch) {
  const NetworkConfig& cfg = state.config;
  if (batch.ndim() != 4 || batch.dim(1) != cfg.in_channels) {
    throw ShapeError("forward: expected B×" + std::to_string(cfg.in_channels) + "×H×W input, got " +
                     to_string(batch.shape()));
  }
  const std::int64_t m = std::int64_t{1} << cfg.depth;
  for (int axis : {2, 3}) {
    const std::int64_t e = batch.dim(axis);
    if (e % m != 0) {
      throw ShapeError("forward: extent " + std::to_string(e) + " is not a multiple of 2^depth = " +
                       std::to_string(m) + "; pad by " + std::to_string(m - e % m));
    }
  }

  std::vector<Tensor> skips, coords, guides;
  Tensor x = batch;
  Tensor path;
  for (std::int64_t i = 0; i < cfg.depth; ++i) {
    const Tensor guide = cfg.has_guide(i) ? guides[static_cast<std::size_t>(i - 1)] : Tensor();
    if (guide.defined() && (guide.dim(2) != x.dim(2) || guide.dim(3) != x.dim(3))) {
      throw ShapeError("forward: guide map does not match the input extent of block " + std::to_string(i));
    }
    Tensor e = conv_block(state, block_name("enc", i), x, guide);
    CoordPoolOutput pool = coord_pool(e);
    skips.push_back(e);
    coords.push_back(pool.coords);
    x = pool.pooled;
    if (i < cfg.localization_layers()) {
      // Guide i+1 needs block i's coordinates, so the path advances in step
      // with the encoder.
      if (i == 0) path = cfg.path_add_coord() ? add_coord(e) : e;
      path = localization_layer(state, i + 1, path, cfg.path_coords() ? pool.coords : Tensor());
      guides.push_back(path);
    }
  }
  Tensor d = aspp(state, x);
  for (std::int64_t i = cfg.depth - 1; i >= 0; --i) {
    const auto si = static_cast<std::size_t>(i);
    Tensor u = cfg.use_coord_pool ? ops::concat_channels({d, coords[si]}) : d;
    u = ops::concat_channels({ops::upsample_nearest2x(u), skips[si]});
    const Tensor guide = cfg.has_guide(i) ? guides[si - 1] : Tensor();
    d = conv_block(state, block_name("dec", i), u, guide);
  }
  return conv2d(d, layer(state, "head"));
}

void save_checkpoint(const ModelState& state, const std::filesystem::path& dir,
                     const std::map<std::string, Tensor>& extra) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create checkpoint directory " + dir.string() + ": " + ec.message());
  std::ostringstream manifest;
  manifest << "fingerprint " << fingerprint_hex(state.fingerprint()) << '\n';
  std::istringstream cfg(state.config.canonical());
  for (std::string line; std::getline(cfg, line);) manifest << "config " << line << '\n';
  auto write = [&](const std::string& kind, const std::string& name, const Tensor& t) {
    const std::string file = name + ".pgdt";
    pgdt::save(t, dir / file);
    manifest << kind << ' ' << name << ' ' << to_string(t.shape()) << ' ' << file << '\n';
  };
  for (const auto& [name, t] : state.params) write("param", name, t);
  for (const auto& [name, t] : extra) write("extra", name, t);
  std::ofstream out(dir / "manifest.txt", std::ios::binary | std::ios::trunc);
  out << manifest.str();
  if (!out) throw IoError("cannot write " + (dir / "manifest.txt").string());
}

ModelState load_checkpoint(const std::filesystem::path& dir, std::map<std::string, Tensor>* extra) {
  std::ifstream in(dir / "manifest.txt", std::ios::binary);
  if (!in) throw IoError("cannot read checkpoint manifest in " + dir.string());
  std::string fingerprint, config_text, line;
  std::vector<std::tuple<std::string, std::string, std::string>> entries;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string kind;
    ls >> kind;
    if (kind == "fingerprint") {
      ls >> fingerprint;
    } else if (kind == "config") {
      std::string rest;
      std::getline(ls >> std::ws, rest);
      config_text += rest + '\n';
    } else if (kind == "param" || kind == "extra") {
      std::string name, shape, file;
      ls >> name >> shape >> file;
      entries.emplace_back(kind, name, file);
    } else if (!kind.empty()) {
      throw CompatibilityError("unknown manifest entry '" + kind + "' in " + dir.string());
    }
  }
  ModelState s;
  s.config = NetworkConfig::parse_canonical(config_text);
  if (fingerprint_hex(s.fingerprint()) != fingerprint) {
    throw CompatibilityError("checkpoint fingerprint " + fingerprint + " does not match its config (" +
                             fingerprint_hex(s.fingerprint()) + ")");
  }
  for (const auto& [kind, name, file] : entries) {
    Tensor t = pgdt::load(dir / file);
    if (kind == "param") {
      t.set_requires_grad(true);
      s.params.emplace(name, t);
    } else if (extra) {
      extra->emplace(name, t);
    }
  }
  const ModelState reference = build(s.config, 0, s.dtype());
  for (const auto& [name, t] : reference.params) {
    if (!s.has(name) || s.param(name).shape() != t.shape()) {
      throw CompatibilityError("checkpoint tensor '" + name + "' is missing or has the wrong shape");
    }
  }
  return s;
}

}  // namespace pgd
