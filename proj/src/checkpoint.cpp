#include "ser/checkpoint.hpp"

#include "binary_io.hpp"

namespace ser::nn {

namespace {

void put_floats(detail::ByteWriter& w, const double* p, Index n) {
  for (Index i = 0; i < n; ++i) w.put(static_cast<float>(p[i]));
}

VectorXd get_floats(detail::ByteReader& r, Index n) {
  VectorXd v(n);
  for (Index i = 0; i < n; ++i) v[i] = r.get<float>();
  return v;
}

}  // namespace

std::string encode_checkpoint(const Mlp& model, const Optimizer* optimizer) {
  model.validate();
  detail::ByteWriter w;
  w.put_bytes("SERM");
  w.put(kCheckpointVersion);
  w.put(static_cast<std::uint32_t>(model.input_dim()));
  w.put(static_cast<std::uint32_t>(model.num_layers()));
  for (const auto& l : model.layers()) {
    w.put(static_cast<std::uint32_t>(l.spec.units));
    w.put(static_cast<std::uint8_t>(l.spec.activation));
    w.put(l.spec.dropout);
    w.put(static_cast<std::uint8_t>(l.spec.batch_norm ? 1 : 0));
    for (Index r = 0; r < l.weight.rows(); ++r)
      for (Index c = 0; c < l.weight.cols(); ++c) w.put(static_cast<float>(l.weight(r, c)));
    put_floats(w, l.bias.data(), l.bias.size());
    if (l.spec.batch_norm) {
      put_floats(w, l.gamma.data(), l.gamma.size());
      put_floats(w, l.beta.data(), l.beta.size());
      put_floats(w, l.running_mean.data(), l.running_mean.size());
      put_floats(w, l.running_var.data(), l.running_var.size());
    }
  }
  w.put(static_cast<std::uint8_t>(optimizer ? 1 : 0));
  if (optimizer) {
    const auto& c = optimizer->config();
    w.put(static_cast<std::uint8_t>(c.kind));
    w.put(c.learning_rate);
    w.put(c.beta1);
    w.put(c.beta2);
    w.put(c.rms_decay);
    w.put(c.epsilon);
    w.put(static_cast<std::uint64_t>(optimizer->steps()));
    w.put(static_cast<std::uint64_t>(optimizer->first_moment().size()));
    put_floats(w, optimizer->first_moment().data(), optimizer->first_moment().size());
    put_floats(w, optimizer->second_moment().data(), optimizer->second_moment().size());
  }
  return w.bytes();
}

Checkpoint decode_checkpoint(const std::string& bytes, const std::string& what) {
  detail::ByteReader r(bytes, what);
  if (r.get_bytes(4) != "SERM") throw Error(what + ": bad magic, not a model checkpoint");
  const auto version = r.get<std::uint16_t>();
  if (version != kCheckpointVersion) throw Error(what + ": unsupported version " + std::to_string(version));
  const int input_dim = static_cast<int>(r.get<std::uint32_t>());
  const auto n_layers = r.get<std::uint32_t>();
  std::vector<DenseLayer> layers;
  int fan_in = input_dim;
  for (std::uint32_t k = 0; k < n_layers; ++k) {
    DenseLayer l;
    l.spec.units = static_cast<int>(r.get<std::uint32_t>());
    const auto act = r.get<std::uint8_t>();
    if (act > static_cast<std::uint8_t>(Activation::softmax)) throw Error(what + ": unknown activation");
    l.spec.activation = static_cast<Activation>(act);
    l.spec.dropout = r.get<double>();
    l.spec.batch_norm = r.get<std::uint8_t>() != 0;
    l.weight.resize(l.spec.units, fan_in);
    for (Index row = 0; row < l.weight.rows(); ++row)
      for (Index col = 0; col < l.weight.cols(); ++col) l.weight(row, col) = r.get<float>();
    l.bias = get_floats(r, l.spec.units);
    if (l.spec.batch_norm) {
      l.gamma = get_floats(r, l.spec.units);
      l.beta = get_floats(r, l.spec.units);
      l.running_mean = get_floats(r, l.spec.units);
      l.running_var = get_floats(r, l.spec.units);
    }
    fan_in = l.spec.units;
    layers.push_back(std::move(l));
  }
  Checkpoint cp;
  cp.model = make_mlp(input_dim, std::move(layers));
  if (r.get<std::uint8_t>() != 0) {
    OptimizerConfig c;
    const auto kind = r.get<std::uint8_t>();
    if (kind > 1) throw Error(what + ": unknown optimizer kind");
    c.kind = static_cast<OptimizerKind>(kind);
    c.learning_rate = r.get<double>();
    c.beta1 = r.get<double>();
    c.beta2 = r.get<double>();
    c.rms_decay = r.get<double>();
    c.epsilon = r.get<double>();
    const auto steps = r.get<std::uint64_t>();
    const auto n = static_cast<Index>(r.get<std::uint64_t>());
    if (n != cp.model.parameter_count()) throw Error(what + ": optimizer state does not match the model");
    VectorXd first = get_floats(r, n);
    VectorXd second = get_floats(r, n);
    cp.optimizer = Optimizer::restore(c, steps, std::move(first), std::move(second));
  }
  if (!r.at_end()) throw Error(what + ": trailing bytes");
  return cp;
}

void save_checkpoint(const std::filesystem::path& path, const Mlp& model, const Optimizer* optimizer) {
  detail::write_file(path.string(), encode_checkpoint(model, optimizer));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(detail::read_file(path.string()), path.string());
}

}  // namespace ser::nn
