#include "wdlab/model.hpp"

#include "wdlab/rng.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstring>
#include <fstream>

namespace wdlab {

namespace {

void validate(const MlpConfig& config) {
  if (config.layer_widths.size() < 2)
    throw std::invalid_argument("MlpConfig: need at least input and output widths");
  for (Index w : config.layer_widths)
    if (w < 1) throw std::invalid_argument("MlpConfig: widths must be >= 1");
}

}  // namespace

Model build_mlp(const MlpConfig& config) {
  validate(config);
  Model model;
  model.config = config;
  Rng rng(config.init_seed);

  const std::size_t layers = config.layer_widths.size() - 1;
  for (std::size_t l = 0; l < layers; ++l) {
    const Index fan_in = config.layer_widths[l];
    const Index fan_out = config.layer_widths[l + 1];
    const bool hidden = l + 1 < layers;
    const double sigma = std::sqrt(2.0 / static_cast<double>(fan_in));

    Tensor w({fan_in, fan_out});
    for (Index i = 0; i < w.size(); ++i) w[i] = sigma * rng.normal();
    const std::string prefix = "l" + std::to_string(l);
    model.params.add(prefix + ".w", std::move(w));

    if (hidden && config.use_batch_norm) {
      Tensor gamma({fan_out}, Eigen::ArrayXd::Ones(fan_out));
      model.params.add(prefix + ".bn.gamma", std::move(gamma));
      model.params.add(prefix + ".bn.beta", Tensor::zeros({fan_out}));
    } else {
      model.params.add(prefix + ".b", Tensor::zeros({fan_out}));
    }
  }
  return model;
}

Var mlp_forward(Model& model, Tape& tape, const Tensor& x) {
  const auto& widths = model.config.layer_widths;
  if (x.rank() != 2 || x.cols() != widths.front()) {
    throw std::invalid_argument("mlp_forward: input must be [b x " +
                                std::to_string(widths.front()) + "], got " +
                                Tensor::shape_string(x.shape()));
  }

  Var h = tape.leaf(x);
  const std::size_t layers = widths.size() - 1;
  for (std::size_t l = 0; l < layers; ++l) {
    const bool hidden = l + 1 < layers;
    const std::string prefix = "l" + std::to_string(l);
    auto pid = [&](const std::string& suffix) {
      auto idx = model.params.find(prefix + suffix);
      if (!idx) throw std::logic_error("mlp_forward: missing parameter " + prefix + suffix);
      return tape.param(model.params, *idx);
    };

    h = matmul(tape, h, pid(".w"));
    if (hidden && model.config.use_batch_norm) {
      h = batch_norm(tape, h, pid(".bn.gamma"), pid(".bn.beta"), model.config.bn_eps);
    } else {
      h = add_row_broadcast(tape, h, pid(".b"));
    }
    if (hidden) h = relu(tape, h);
  }
  return h;
}

bool is_norm_param(const std::string& name) {
  return name.find(".bn.") != std::string::npos;
}

namespace {
constexpr char kMagic[8] = {'W', 'D', 'L', 'A', 'B', 'C', 'K', '1'};
}

void save_checkpoint(const Model& model, const std::string& path) {
  nlohmann::json header;
  header["format_version"] = 1;
  header["config"] = {
      {"layer_widths", model.config.layer_widths},
      {"use_batch_norm", model.config.use_batch_norm},
      {"init_seed", model.config.init_seed},
      {"bn_eps", model.config.bn_eps},
  };
  auto& tensors = header["tensors"] = nlohmann::json::array();
  for (std::size_t i = 0; i < model.params.size(); ++i) {
    tensors.push_back({{"name", model.params.name(i)},
                       {"shape", model.params.value(i).shape()}});
  }
  const std::string hs = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path);
  out.write(kMagic, sizeof(kMagic));
  const std::uint64_t hlen = hs.size();
  out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  for (std::size_t i = 0; i < model.params.size(); ++i) {
    const Tensor& t = model.params.value(i);
    out.write(reinterpret_cast<const char*>(t.array().data()),
              static_cast<std::streamsize>(t.size() * sizeof(double)));
  }
  if (!out) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

Model load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);

  char magic[sizeof(kMagic)];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw std::runtime_error("load_checkpoint: bad magic in " + path);

  std::uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  if (!in || hlen == 0 || hlen > (1u << 24))
    throw std::runtime_error("load_checkpoint: implausible header length in " + path);
  std::string hs(hlen, '\0');
  in.read(hs.data(), static_cast<std::streamsize>(hlen));
  if (!in) throw std::runtime_error("load_checkpoint: truncated header in " + path);

  const nlohmann::json header = nlohmann::json::parse(hs);
  Model model;
  model.config.layer_widths =
      header.at("config").at("layer_widths").get<std::vector<Index>>();
  model.config.use_batch_norm = header.at("config").at("use_batch_norm").get<bool>();
  model.config.init_seed = header.at("config").at("init_seed").get<std::uint64_t>();
  model.config.bn_eps = header.at("config").at("bn_eps").get<double>();

  for (const auto& entry : header.at("tensors")) {
    const auto shape = entry.at("shape").get<std::vector<Index>>();
    Tensor t(shape);
    in.read(reinterpret_cast<char*>(t.array().data()),
            static_cast<std::streamsize>(t.size() * sizeof(double)));
    if (!in) throw std::runtime_error("load_checkpoint: truncated data in " + path);
    model.params.add(entry.at("name").get<std::string>(), std::move(t));
  }
  return model;
}

}  // namespace wdlab
