#include "fflab/model.hpp"

#include "fflab/errors.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <regex>

namespace fflab {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

void ModelConfig::validate() const {
  auto require = [](bool ok, const char* what) {
    if (!ok) throw ConstructionError(std::string("invalid model config: ") + what);
  };
  require(n_layers > 0, "n_layers must be positive");
  require(n_heads > 0, "n_heads must be positive");
  require(d_head > 0, "d_head must be positive");
  require(d_head % 2 == 0, "d_head must be even for rotary embeddings");
  require(d_model == n_heads * d_head, "d_model must equal n_heads * d_head");
  require(d_mlp > 0, "d_mlp must be positive");
  require(vocab_size >= 32, "vocab_size must be at least 32");
  require(max_seq > 0, "max_seq must be positive");
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"n_layers", c.n_layers}, {"n_heads", c.n_heads}, {"d_model", c.d_model}, {"d_head", c.d_head},
       {"d_mlp", c.d_mlp},       {"vocab_size", c.vocab_size}, {"max_seq", c.max_seq}, {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.n_layers = j.value("n_layers", d.n_layers);
  c.n_heads = j.value("n_heads", d.n_heads);
  c.d_model = j.value("d_model", d.d_model);
  c.d_head = j.value("d_head", d.d_head);
  c.d_mlp = j.value("d_mlp", d.d_mlp);
  c.vocab_size = j.value("vocab_size", d.vocab_size);
  c.max_seq = j.value("max_seq", d.max_seq);
  c.seed = j.value("seed", d.seed);
}

Weights zero_weights(const ModelConfig& c) {
  c.validate();
  Weights w;
  w.config = c;
  const int q = c.qkv_width();
  w.embedding = Matrix::Zero(c.vocab_size, c.d_model);
  w.layers.resize(static_cast<size_t>(c.n_layers));
  for (auto& l : w.layers) {
    l.attn_gain = Vector::Ones(c.d_model);
    l.wq = Matrix::Zero(c.d_model, q);
    l.wk = Matrix::Zero(c.d_model, q);
    l.wv = Matrix::Zero(c.d_model, q);
    l.wo = Matrix::Zero(q, c.d_model);
    l.mlp_gain = Vector::Ones(c.d_model);
    l.w_gate = Matrix::Zero(c.d_model, c.d_mlp);
    l.w_up = Matrix::Zero(c.d_model, c.d_mlp);
    l.w_down = Matrix::Zero(c.d_mlp, c.d_model);
  }
  w.final_gain = Vector::Ones(c.d_model);
  w.unembedding = Matrix::Zero(c.d_model, c.vocab_size);
  return w;
}

namespace {

void fill_normal(Matrix& m, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
}

}  // namespace

Weights init_weights(const ModelConfig& c) {
  Weights w = zero_weights(c);
  std::mt19937_64 rng(c.seed);
  const double in_std = 1.0 / std::sqrt(static_cast<double>(c.d_model));
  const double out_scale = 1.0 / std::sqrt(2.0 * c.n_layers);
  fill_normal(w.embedding, 1.0, rng);
  for (auto& l : w.layers) {
    fill_normal(l.wq, in_std, rng);
    fill_normal(l.wk, in_std, rng);
    fill_normal(l.wv, in_std, rng);
    fill_normal(l.wo, out_scale / std::sqrt(static_cast<double>(c.qkv_width())), rng);
    fill_normal(l.w_gate, in_std, rng);
    fill_normal(l.w_up, in_std, rng);
    fill_normal(l.w_down, out_scale / std::sqrt(static_cast<double>(c.d_mlp)), rng);
  }
  fill_normal(w.unembedding, in_std, rng);
  return w;
}

void validate_weights(const Weights& w) {
  const ModelConfig& c = w.config;
  c.validate();
  auto check = [](const char* name, Eigen::Index r, Eigen::Index cols, Eigen::Index er, Eigen::Index ec, bool finite) {
    if (r != er || cols != ec)
      throw ConstructionError(std::string("tensor ") + name + " has shape " + std::to_string(r) + "x" +
                              std::to_string(cols) + ", expected " + std::to_string(er) + "x" + std::to_string(ec));
    if (!finite) throw ConstructionError(std::string("tensor ") + name + " has non-finite entries");
  };
  const int q = c.qkv_width();
  check("embedding", w.embedding.rows(), w.embedding.cols(), c.vocab_size, c.d_model, w.embedding.allFinite());
  if (static_cast<int>(w.layers.size()) != c.n_layers) throw ConstructionError("layer count does not match config");
  for (const auto& l : w.layers) {
    check("attn_gain", l.attn_gain.size(), 1, c.d_model, 1, l.attn_gain.allFinite());
    check("wq", l.wq.rows(), l.wq.cols(), c.d_model, q, l.wq.allFinite());
    check("wk", l.wk.rows(), l.wk.cols(), c.d_model, q, l.wk.allFinite());
    check("wv", l.wv.rows(), l.wv.cols(), c.d_model, q, l.wv.allFinite());
    check("wo", l.wo.rows(), l.wo.cols(), q, c.d_model, l.wo.allFinite());
    check("mlp_gain", l.mlp_gain.size(), 1, c.d_model, 1, l.mlp_gain.allFinite());
    check("w_gate", l.w_gate.rows(), l.w_gate.cols(), c.d_model, c.d_mlp, l.w_gate.allFinite());
    check("w_up", l.w_up.rows(), l.w_up.cols(), c.d_model, c.d_mlp, l.w_up.allFinite());
    check("w_down", l.w_down.rows(), l.w_down.cols(), c.d_mlp, c.d_model, l.w_down.allFinite());
  }
  check("final_gain", w.final_gain.size(), 1, c.d_model, 1, w.final_gain.allFinite());
  check("unembedding", w.unembedding.rows(), w.unembedding.cols(), c.d_model, c.vocab_size, w.unembedding.allFinite());
}

namespace {

template <typename M>
void round_to_float(M& m) {
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<double>(static_cast<float>(m.data()[i]));
}

void round_weights(Weights& w) {
  round_to_float(w.embedding);
  for (auto& l : w.layers) {
    round_to_float(l.attn_gain);
    round_to_float(l.wq);
    round_to_float(l.wk);
    round_to_float(l.wv);
    round_to_float(l.wo);
    round_to_float(l.mlp_gain);
    round_to_float(l.w_gate);
    round_to_float(l.w_up);
    round_to_float(l.w_down);
  }
  round_to_float(w.final_gain);
  round_to_float(w.unembedding);
}

}  // namespace

ModelBundle::ModelBundle(Weights weights, nlohmann::json metadata) {
  validate_weights(weights);
  round_weights(weights);
  validate_weights(weights);  // float overflow would show up here
  weights_ = std::make_shared<const Weights>(std::move(weights));
  metadata_ = std::make_shared<const nlohmann::json>(std::move(metadata));
}

ComponentId ComponentId::from_index(const ModelConfig& c, int index) {
  if (index < 0 || index >= c.n_components()) throw InputError("component index out of range: " + std::to_string(index));
  if (index == 0) return embedding();
  const int rest = index - 1;
  const int layer = rest / (c.n_heads + 1);
  const int slot = rest % (c.n_heads + 1);
  return slot == c.n_heads ? mlp(layer) : attn_head(layer, slot);
}

ComponentId ComponentId::parse(const std::string& name) {
  static const std::regex head_re(R"(L(\d+)H(\d+))");
  static const std::regex mlp_re(R"(M(\d+))");
  std::smatch m;
  if (name == "EMB") return embedding();
  if (std::regex_match(name, m, head_re)) return attn_head(std::stoi(m[1]), std::stoi(m[2]));
  if (std::regex_match(name, m, mlp_re)) return mlp(std::stoi(m[1]));
  throw InputError("cannot parse component name '" + name + "'");
}

int ComponentId::index(const ModelConfig& c) const {
  switch (kind) {
    case Kind::Embedding:
      return 0;
    case Kind::Head:
      if (layer < 0 || layer >= c.n_layers || head < 0 || head >= c.n_heads)
        throw InputError("head " + name() + " out of range");
      return 1 + layer * (c.n_heads + 1) + head;
    case Kind::Mlp:
      if (layer < 0 || layer >= c.n_layers) throw InputError("mlp " + name() + " out of range");
      return 1 + layer * (c.n_heads + 1) + c.n_heads;
  }
  return -1;
}

std::string ComponentId::name() const {
  switch (kind) {
    case Kind::Embedding:
      return "EMB";
    case Kind::Head:
      return "L" + std::to_string(layer) + "H" + std::to_string(head);
    case Kind::Mlp:
      return "M" + std::to_string(layer);
  }
  return "?";
}

std::vector<ComponentId> all_components(const ModelConfig& c) {
  std::vector<ComponentId> out;
  out.reserve(static_cast<size_t>(c.n_components()));
  for (int i = 0; i < c.n_components(); ++i) out.push_back(ComponentId::from_index(c, i));
  return out;
}

Matrix norm_rows(const Matrix& x, const Vector& gain) {
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) out.row(r) = rms_normalize(x.row(r).transpose(), gain).transpose();
  return out;
}

Matrix project(const Matrix& x, const Matrix& w) {
  Matrix out(x.rows(), w.cols());
  out.noalias() = x * w;
  return out;
}

void rope_rows(Matrix& m, int n_heads, int d_head, const std::vector<int>& positions) {
  if (static_cast<Eigen::Index>(positions.size()) != m.rows()) throw InputError("rope_rows: positions length mismatch");
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (int h = 0; h < n_heads; ++h)
      rope_apply_inplace(std::span<double>(m.row(r).data() + h * d_head, static_cast<size_t>(d_head)),
                         positions[static_cast<size_t>(r)]);
}

Matrix attention_pattern(const Matrix& q, const Matrix& k, int head, int d_head) {
  const Eigen::Index n = q.rows();
  const Eigen::Index kn = k.rows();
  if (kn != n) throw InputError("attention_pattern: query/key length mismatch");
  const double scale = 1.0 / std::sqrt(static_cast<double>(d_head));
  Matrix qh = q.middleCols(head * d_head, d_head);
  Matrix kh = k.middleCols(head * d_head, d_head);
  Matrix scores(n, n);
  scores.noalias() = qh * kh.transpose();
  Matrix pattern = Matrix::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    Vector row = scores.row(i).head(i + 1).transpose() * scale;
    pattern.row(i).head(i + 1) = softmax(row).transpose();
  }
  return pattern;
}

Vector unembed(const Weights& w, const Vector& residual) {
  const Vector xn = rms_normalize(residual, w.final_gain);
  Vector logits(w.config.vocab_size);
  logits.noalias() = w.unembedding.transpose() * xn;
  return logits;
}

namespace {

double silu(double x) { return x / (1.0 + std::exp(-x)); }

}  // namespace

ActivationTrace forward(const Weights& w, const std::vector<int>& tokens) {
  const ModelConfig& c = w.config;
  const int n = static_cast<int>(tokens.size());
  if (n == 0) throw InputError("forward: empty token sequence");
  if (n > c.max_seq) throw InputError("forward: sequence length " + std::to_string(n) + " exceeds max_seq");
  for (int t : tokens)
    if (t < 0 || t >= c.vocab_size) throw InputError("forward: token id " + std::to_string(t) + " out of range");

  ActivationTrace tr;
  tr.tokens = tokens;
  tr.positions.resize(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) tr.positions[static_cast<size_t>(i)] = i;
  tr.components = Matrix::Zero(c.n_components(), c.d_model);

  Matrix x(n, c.d_model);
  for (int i = 0; i < n; ++i) x.row(i) = w.embedding.row(tokens[static_cast<size_t>(i)]);
  tr.components.row(0) = x.row(n - 1);
  tr.resid_pre.push_back(x);

  for (int l = 0; l < c.n_layers; ++l) {
    const LayerWeights& lw = w.layers[static_cast<size_t>(l)];
    const Matrix xn = norm_rows(x, lw.attn_gain);
    Matrix q = project(xn, lw.wq);
    Matrix k = project(xn, lw.wk);
    const Matrix v = project(xn, lw.wv);
    rope_rows(q, c.n_heads, c.d_head, tr.positions);
    rope_rows(k, c.n_heads, c.d_head, tr.positions);
    std::vector<Matrix> pats;
    for (int h = 0; h < c.n_heads; ++h) {
      Matrix a = attention_pattern(q, k, h, c.d_head);
      Matrix z(n, c.d_head);
      z.noalias() = a * v.middleCols(h * c.d_head, c.d_head);
      Matrix out(n, c.d_model);
      out.noalias() = z * lw.wo.middleRows(h * c.d_head, c.d_head);
      x += out;
      tr.components.row(ComponentId::attn_head(l, h).index(c)) = out.row(n - 1);
      pats.push_back(std::move(a));
    }
    tr.queries.push_back(std::move(q));
    tr.keys.push_back(std::move(k));
    tr.patterns.push_back(std::move(pats));
    tr.resid_mid.push_back(x);

    const Matrix xm = norm_rows(x, lw.mlp_gain);
    const Matrix g = project(xm, lw.w_gate);
    const Matrix u = project(xm, lw.w_up);
    Matrix hidden(n, c.d_mlp);
    for (Eigen::Index i = 0; i < hidden.size(); ++i) hidden.data()[i] = silu(g.data()[i]) * u.data()[i];
    const Matrix m = project(hidden, lw.w_down);
    x += m;
    tr.components.row(ComponentId::mlp(l).index(c)) = m.row(n - 1);
    tr.resid_pre.push_back(x);
  }
  tr.final_logits = unembed(w, tr.final_residual());
  if (!tr.final_logits.allFinite()) throw DomainError("forward produced non-finite logits");
  return tr;
}

ActivationTrace forward(const ModelBundle& model, const std::vector<int>& tokens) {
  return forward(model.weights(), tokens);
}

Probability answer_probability(const ActivationTrace& trace, const std::vector<int>& answer_class) {
  if (answer_class.empty()) throw InputError("answer_probability: empty answer class");
  return Probability(class_probability(trace.final_logits, answer_class));
}

namespace {

Vector sum_rows(const Matrix& rows) {
  Vector total = Vector::Zero(rows.cols());
  for (Eigen::Index i = 0; i < rows.rows(); ++i) total += rows.row(i).transpose();
  return total;
}

}  // namespace

Vector recombine(const Weights& w, const Matrix& components,
                 const std::vector<std::pair<ComponentId, Vector>>& overrides) {
  const ModelConfig& c = w.config;
  if (components.rows() != c.n_components() || components.cols() != c.d_model)
    throw InputError("recombine: component matrix has wrong shape");
  Matrix rows = components;
  for (const auto& [id, v] : overrides) {
    if (v.size() != c.d_model) throw InputError("recombine: override for " + id.name() + " has wrong dimension");
    rows.row(id.index(c)) = v.transpose();
  }
  return unembed(w, sum_rows(rows));
}

Vector recombine(const ModelBundle& model, const Matrix& components,
                 const std::vector<std::pair<ComponentId, Vector>>& overrides) {
  return recombine(model.weights(), components, overrides);
}

Vector recombine_masked(const Weights& w, const Matrix& dest, const Matrix& source, const std::vector<char>& mask) {
  if (dest.rows() != source.rows() || dest.cols() != source.cols() ||
      static_cast<Eigen::Index>(mask.size()) != dest.rows())
    throw InputError("recombine_masked: shape mismatch");
  Vector total = Vector::Zero(dest.cols());
  for (Eigen::Index i = 0; i < dest.rows(); ++i)
    total += (mask[static_cast<size_t>(i)] ? source.row(i) : dest.row(i)).transpose();
  return unembed(w, total);
}

// ---- checkpoint IO ----

namespace {

constexpr char kMagic[4] = {'F', 'F', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

struct TensorRef {
  std::string name;
  std::vector<std::uint64_t> shape;
  double* data;
  const double* cdata;
  std::size_t count() const {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
  }
};

template <typename F>
void for_each_tensor(const ModelConfig& c, Weights* mut, const Weights* con, F&& f) {
  auto mat = [&](const std::string& name, Matrix* m, const Matrix* cm, Eigen::Index r, Eigen::Index cols) {
    f(TensorRef{name, {static_cast<std::uint64_t>(r), static_cast<std::uint64_t>(cols)}, m ? m->data() : nullptr,
                cm ? cm->data() : nullptr});
  };
  auto vec = [&](const std::string& name, Vector* v, const Vector* cv, Eigen::Index n) {
    f(TensorRef{name, {static_cast<std::uint64_t>(n)}, v ? v->data() : nullptr, cv ? cv->data() : nullptr});
  };
  const int q = c.qkv_width();
  mat("embedding", mut ? &mut->embedding : nullptr, con ? &con->embedding : nullptr, c.vocab_size, c.d_model);
  for (int l = 0; l < c.n_layers; ++l) {
    LayerWeights* ml = mut ? &mut->layers[static_cast<size_t>(l)] : nullptr;
    const LayerWeights* cl = con ? &con->layers[static_cast<size_t>(l)] : nullptr;
    const std::string p = "layers." + std::to_string(l) + ".";
    vec(p + "attn_gain", ml ? &ml->attn_gain : nullptr, cl ? &cl->attn_gain : nullptr, c.d_model);
    mat(p + "wq", ml ? &ml->wq : nullptr, cl ? &cl->wq : nullptr, c.d_model, q);
    mat(p + "wk", ml ? &ml->wk : nullptr, cl ? &cl->wk : nullptr, c.d_model, q);
    mat(p + "wv", ml ? &ml->wv : nullptr, cl ? &cl->wv : nullptr, c.d_model, q);
    mat(p + "wo", ml ? &ml->wo : nullptr, cl ? &cl->wo : nullptr, q, c.d_model);
    vec(p + "mlp_gain", ml ? &ml->mlp_gain : nullptr, cl ? &cl->mlp_gain : nullptr, c.d_model);
    mat(p + "w_gate", ml ? &ml->w_gate : nullptr, cl ? &cl->w_gate : nullptr, c.d_model, c.d_mlp);
    mat(p + "w_up", ml ? &ml->w_up : nullptr, cl ? &cl->w_up : nullptr, c.d_model, c.d_mlp);
    mat(p + "w_down", ml ? &ml->w_down : nullptr, cl ? &cl->w_down : nullptr, c.d_mlp, c.d_model);
  }
  vec("final_gain", mut ? &mut->final_gain : nullptr, con ? &con->final_gain : nullptr, c.d_model);
  mat("unembedding", mut ? &mut->unembedding : nullptr, con ? &con->unembedding : nullptr, c.d_model, c.vocab_size);
}

template <typename T>
void put(std::vector<std::uint8_t>& out, T v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  out.insert(out.end(), p, p + sizeof(T));
}

void put_string(std::vector<std::uint8_t>& out, const std::string& s) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out.insert(out.end(), s.begin(), s.end());
}

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& b) : b_(b) {}

  template <typename T>
  T get(const char* field) {
    need(sizeof(T), field);
    T v;
    std::memcpy(&v, b_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::string get_string(const char* field, std::size_t max_len) {
    const auto n = get<std::uint32_t>(field);
    if (n > max_len) throw FormatError(std::string("checkpoint field '") + field + "' has implausible length");
    need(n, field);
    std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  void need(std::size_t n, const char* field) const {
    if (pos_ + n > b_.size() || pos_ + n < pos_)
      throw FormatError(std::string("checkpoint truncated while reading '") + field + "'");
  }
  std::size_t pos() const { return pos_; }

 private:
  const std::vector<std::uint8_t>& b_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const ModelBundle& model) {
  const Weights& w = model.weights();
  const ModelConfig& c = w.config;
  std::vector<std::uint8_t> out;
  out.insert(out.end(), kMagic, kMagic + 4);
  put<std::uint32_t>(out, kVersion);
  nlohmann::json record = {{"model", c}, {"metadata", model.metadata()}};
  put_string(out, record.dump());

  std::vector<TensorRef> refs;
  for_each_tensor(c, nullptr, &w, [&](const TensorRef& r) { refs.push_back(r); });
  put<std::uint32_t>(out, static_cast<std::uint32_t>(refs.size()));
  std::uint64_t offset = 0;
  for (const auto& r : refs) {
    put_string(out, r.name);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(r.shape.size()));
    for (auto d : r.shape) put<std::uint64_t>(out, d);
    put<std::uint64_t>(out, offset);
    offset += r.count() * sizeof(float);
  }
  for (const auto& r : refs)
    for (std::size_t i = 0; i < r.count(); ++i) put<float>(out, static_cast<float>(r.cdata[i]));
  return out;
}

ModelBundle deserialize_checkpoint(const std::vector<std::uint8_t>& bytes) {
  Reader rd(bytes);
  rd.need(4, "magic");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError("checkpoint field 'magic' is not FFCK");
  rd.get<std::uint32_t>("magic");
  const auto version = rd.get<std::uint32_t>("version");
  if (version != kVersion)
    throw FormatError("checkpoint field 'version' is " + std::to_string(version) + ", expected " +
                      std::to_string(kVersion));
  const std::string text = rd.get_string("config", 1u << 24);
  nlohmann::json record;
  try {
    record = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint field 'config' is not valid JSON: ") + e.what());
  }
  if (!record.is_object() || !record.contains("model")) throw FormatError("checkpoint field 'config' lacks 'model'");
  ModelConfig c;
  try {
    c = record.at("model").get<ModelConfig>();
    c.validate();
  } catch (const std::exception& e) {
    throw FormatError(std::string("checkpoint field 'config' is invalid: ") + e.what());
  }
  Weights w = zero_weights(c);
  std::vector<TensorRef> expected;
  for_each_tensor(c, &w, nullptr, [&](const TensorRef& r) { expected.push_back(r); });

  const auto count = rd.get<std::uint32_t>("manifest count");
  if (count != expected.size())
    throw FormatError("checkpoint field 'manifest count' is " + std::to_string(count) + ", expected " +
                      std::to_string(expected.size()));
  std::uint64_t expected_offset = 0;
  for (const auto& r : expected) {
    const std::string name = rd.get_string("manifest name", 1024);
    if (name != r.name) throw FormatError("checkpoint manifest entry '" + name + "' where '" + r.name + "' was expected");
    const auto ndim = rd.get<std::uint32_t>("manifest ndim");
    if (ndim != r.shape.size()) throw FormatError("checkpoint tensor '" + name + "' has wrong rank");
    for (std::size_t d = 0; d < ndim; ++d) {
      const auto dim = rd.get<std::uint64_t>("manifest shape");
      if (dim != r.shape[d]) throw FormatError("checkpoint tensor '" + name + "' has wrong shape");
    }
    const auto off = rd.get<std::uint64_t>("manifest offset");
    if (off != expected_offset) throw FormatError("checkpoint tensor '" + name + "' has wrong byte offset");
    expected_offset += r.count() * sizeof(float);
  }
  const std::size_t data_start = rd.pos();
  if (bytes.size() - data_start != expected_offset)
    throw FormatError(bytes.size() - data_start < expected_offset ? "checkpoint truncated while reading 'tensor data'"
                                                                  : "checkpoint has trailing bytes after 'tensor data'");
  std::size_t p = data_start;
  for (const auto& r : expected) {
    for (std::size_t i = 0; i < r.count(); ++i) {
      float f;
      std::memcpy(&f, bytes.data() + p, sizeof(float));
      p += sizeof(float);
      if (!std::isfinite(f)) throw FormatError("checkpoint tensor '" + r.name + "' has non-finite values");
      r.data[i] = static_cast<double>(f);
    }
  }
  return ModelBundle(std::move(w), record.value("metadata", nlohmann::json::object()));
}

void save_checkpoint(const ModelBundle& model, const std::string& path) {
  const auto bytes = serialize_checkpoint(model);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw InputError("cannot open checkpoint for writing: " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw InputError("failed writing checkpoint: " + path);
}

ModelBundle load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw InputError("cannot open checkpoint: " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

}  // namespace fflab
