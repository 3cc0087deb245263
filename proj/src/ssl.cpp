#include "fedssl/ssl.hpp"

#include <cmath>
#include <numeric>

#include "fedssl/error.hpp"

namespace fedssl {

std::string_view to_string(LossKind kind) {
  switch (kind) {
    case LossKind::kNegCosine: return "neg_cosine";
    case LossKind::kNtXent: return "nt_xent";
    case LossKind::kInfoNceQueue: return "info_nce_queue";
  }
  return "unknown";
}

LossKind loss_kind_from_string(std::string_view name) {
  if (name == "neg_cosine") return LossKind::kNegCosine;
  if (name == "nt_xent") return LossKind::kNtXent;
  if (name == "info_nce_queue") return LossKind::kInfoNceQueue;
  fail(ErrorKind::kConfig, "unknown loss kind '" + std::string(name) + "'");
}

MethodConfig MethodConfig::byol() { return MethodConfig{}; }

MethodConfig MethodConfig::simsiam() {
  MethodConfig m;
  m.target_ema = false;
  m.weight_sharing = true;
  return m;
}

MethodConfig MethodConfig::simclr() {
  MethodConfig m;
  m.has_predictor = false;
  m.stop_gradient = false;
  m.target_ema = false;
  m.weight_sharing = true;
  m.loss_kind = LossKind::kNtXent;
  m.temperature = 0.5;
  return m;
}

MethodConfig MethodConfig::moco() {
  MethodConfig m;
  m.has_predictor = false;
  m.loss_kind = LossKind::kInfoNceQueue;
  m.temperature = 0.07;
  return m;
}

MethodConfig MethodConfig::preset(std::string_view name) {
  if (name == "byol") return byol();
  if (name == "simsiam") return simsiam();
  if (name == "simclr") return simclr();
  if (name == "moco") return moco();
  fail(ErrorKind::kConfig, "unknown method preset '" + std::string(name) + "'");
}

void MethodConfig::validate() const {
  require(!(weight_sharing && target_ema), ErrorKind::kConfig,
          "weight sharing and target EMA are mutually exclusive");
  require(temperature > 0.0, ErrorKind::kConfig, "temperature must be positive");
  require(queue_size >= 1, ErrorKind::kConfig, "queue size must be positive");
  require(momentum >= 0.0 && momentum <= 1.0, ErrorKind::kConfig, "momentum must lie in [0, 1]");
}

void ArchSpec::validate() const {
  encoder.validate();
  predictor.validate();
  require(predictor.input_width() == encoder.output_width() &&
              predictor.output_width() == encoder.output_width(),
          ErrorKind::kConfig, "predictor must map the embedding width to itself");
}

NamedParams init_global_params(const MethodConfig& method, const ArchSpec& arch, Rng& rng) {
  arch.validate();
  NamedParams out;
  out.add(std::string(kEncoder), Network::initialize(arch.encoder, rng).params());
  if (method.has_predictor)
    out.add(std::string(kPredictor), Network::initialize(arch.predictor, rng).params());
  return out;
}

ClientNets ClientNets::create(const MethodConfig& method, const ArchSpec& arch,
                              const NamedParams& global, Rng& rng) {
  method.validate();
  arch.validate();
  ClientNets nets(Network(arch.encoder, global.group(kEncoder)));
  if (method.has_predictor) nets.predictor.emplace(arch.predictor, global.group(kPredictor));
  if (!method.weight_sharing) nets.target_encoder.emplace(arch.encoder, global.group(kEncoder));
  if (method.loss_kind == LossKind::kInfoNceQueue) {
    const int dim = arch.encoder.output_width();
    nets.queue.emplace(static_cast<std::size_t>(method.queue_size), dim);
    Matrix init(method.queue_size, dim);
    for (Eigen::Index i = 0; i < init.size(); ++i) init.data()[i] = rng.normal();
    nets.queue->enqueue(normalize_rows(init));
  }
  return nets;
}

NamedParams ClientNets::online_params() const {
  NamedParams out;
  out.add(std::string(kEncoder), online_encoder.params());
  if (predictor) out.add(std::string(kPredictor), predictor->params());
  return out;
}

void ClientNets::set_online_params(const NamedParams& params) {
  online_encoder.set_params(params.group(kEncoder));
  if (predictor) predictor->set_params(params.group(kPredictor));
}

void ClientNets::set_target_params(const Vector& encoder_params) {
  if (target_encoder)
    target_encoder->set_params(encoder_params);
  else
    online_encoder.set_params(encoder_params);
}

namespace {

// Forward state of one view through every network that sees it.
struct ViewPass {
  ForwardCache enc_cache;
  ForwardCache pred_cache;
  ForwardCache target_cache;
  Matrix embedding;  // online encoder output
  Matrix online;     // predictor output, or embedding without predictor
  Matrix target;     // target encoder output
  Matrix grad_online;
  Matrix grad_target;
  bool has_target = false;
};

void run_online(const ClientNets& nets, const Matrix& view, ViewPass& pass) {
  pass.embedding = nets.online_encoder.forward(view, pass.enc_cache);
  pass.online = nets.predictor ? nets.predictor->forward(pass.embedding, pass.pred_cache)
                               : pass.embedding;
  pass.grad_online = Matrix::Zero(pass.online.rows(), pass.online.cols());
}

void run_target(const ClientNets& nets, const Matrix& view, ViewPass& pass) {
  pass.target = nets.target_encoder ? nets.target_encoder->forward(view, pass.target_cache)
                                    : pass.embedding;
  pass.grad_target = Matrix::Zero(pass.target.rows(), pass.target.cols());
  pass.has_target = true;
}

}  // namespace

StepGradients ssl_gradients(const ClientNets& nets, const MethodConfig& method, const Matrix& v1,
                            const Matrix& v2) {
  require(v1.rows() == v2.rows() && v1.cols() == v2.cols(), ErrorKind::kShapeMismatch,
          "view batches differ in shape");
  const bool symmetric = method.loss_kind == LossKind::kNegCosine && method.symmetrize;

  ViewPass a, b;
  run_online(nets, v1, a);
  // The aliased target reuses the online embedding of its view.
  if (symmetric || nets.target_aliased()) run_online(nets, v2, b);
  run_target(nets, v2, b);
  if (symmetric) run_target(nets, v1, a);

  StepGradients out;
  switch (method.loss_kind) {
    case LossKind::kNegCosine: {
      LossGrad l12 = neg_cosine_loss(a.online, b.target);
      if (symmetric) {
        LossGrad l21 = neg_cosine_loss(b.online, a.target);
        out.loss = 0.5 * (l12.value + l21.value);
        a.grad_online += 0.5 * l12.grad_a;
        b.grad_target += 0.5 * l12.grad_b;
        b.grad_online += 0.5 * l21.grad_a;
        a.grad_target += 0.5 * l21.grad_b;
      } else {
        out.loss = l12.value;
        a.grad_online += l12.grad_a;
        b.grad_target += l12.grad_b;
      }
      break;
    }
    case LossKind::kNtXent: {
      LossGrad l = nt_xent_loss(a.online, b.target, method.temperature);
      out.loss = l.value;
      a.grad_online += l.grad_a;
      b.grad_target += l.grad_b;
      break;
    }
    case LossKind::kInfoNceQueue: {
      require(nets.queue.has_value(), ErrorKind::kInvalidArgument, "queue method without a queue");
      LossGrad l = info_nce_queue_loss(a.online, b.target, nets.queue->as_matrix(),
                                       method.temperature);
      out.loss = l.value;
      a.grad_online += l.grad_a;
      b.grad_target += l.grad_b;
      out.keys = normalize_rows(b.target);
      break;
    }
  }
  require(std::isfinite(out.loss), ErrorKind::kNumeric, "non-finite loss (collapse to NaN)");

  if (method.stop_gradient) {
    if (a.has_target) a.grad_target.setZero();
    b.grad_target.setZero();
  }

  Vector enc_grad = Vector::Zero(nets.online_encoder.params().size());
  Vector pred_grad;
  if (nets.predictor) pred_grad = Vector::Zero(nets.predictor->params().size());
  Vector target_grad;
  if (nets.target_encoder) target_grad = Vector::Zero(nets.target_encoder->params().size());

  for (ViewPass* pass : {&a, &b}) {
    if (pass->enc_cache.valid) {
      Matrix g_embed;
      if (nets.predictor) {
        Backprop bp = nets.predictor->backward(pass->pred_cache, pass->grad_online);
        pred_grad += bp.param_grad;
        g_embed = std::move(bp.input_grad);
      } else {
        g_embed = pass->grad_online;
      }
      if (pass->has_target && nets.target_aliased()) g_embed += pass->grad_target;
      enc_grad += nets.online_encoder.backward(pass->enc_cache, g_embed).param_grad;
    }
    if (pass->has_target && nets.target_encoder && !method.stop_gradient)
      target_grad += nets.target_encoder->backward(pass->target_cache, pass->grad_target).param_grad;
  }

  out.online.add(std::string(kEncoder), std::move(enc_grad));
  if (nets.predictor) out.online.add(std::string(kPredictor), std::move(pred_grad));
  if (nets.target_encoder) out.target = std::move(target_grad);
  return out;
}

Vector target_momentum_update(const Vector& target, const Vector& online, double m) {
  require(target.size() == online.size(), ErrorKind::kShapeMismatch,
          "target and online encoders differ in shape");
  require(m >= 0.0 && m <= 1.0, ErrorKind::kInvalidArgument, "momentum must lie in [0, 1]");
  return m * target + (1.0 - m) * online;
}

NamedParams target_momentum_update(const NamedParams& target, const NamedParams& online, double m) {
  check_same_shape(target, online);
  NamedParams out;
  for (std::size_t g = 0; g < target.group_count(); ++g) {
    const auto& [name, t] = target.groups()[g];
    out.add(name, target_momentum_update(t, online.groups()[g].second, m));
  }
  return out;
}

void update_target(ClientNets& nets, const MethodConfig& method) {
  require(!nets.target_aliased(), ErrorKind::kProtocol,
          "momentum update on a weight-shared target");
  require(method.target_ema, ErrorKind::kProtocol, "momentum update with target EMA disabled");
  nets.target_encoder->set_params(target_momentum_update(
      nets.target_encoder->params(), nets.online_encoder.params(), method.momentum));
}

LocalTrainResult local_train(ClientNets& nets, const MethodConfig& method, const Matrix& data,
                             const LocalTrainSpec& spec, OptimizerState& opt, Rng& rng) {
  require(spec.epochs >= 1, ErrorKind::kInvalidArgument, "local training needs at least one epoch");
  require(data.rows() > 0, ErrorKind::kInvalidArgument, "local dataset is empty");
  require(spec.batch_size >= 2, ErrorKind::kInvalidArgument, "batch size must be at least 2");
  require(spec.batch_size <= data.rows(), ErrorKind::kInvalidArgument,
          "batch size exceeds local dataset size");

  const Eigen::Index n = data.rows();
  const Eigen::Index bs = spec.batch_size;
  const Eigen::Index batches = n / bs;
  std::vector<std::size_t> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), std::size_t{0});

  LocalTrainResult result;
  Matrix v1(bs, data.cols()), v2(bs, data.cols());
  for (int epoch = 0; epoch < spec.epochs; ++epoch) {
    rng.shuffle(std::span<std::size_t>(order));
    double epoch_total = 0.0;
    for (Eigen::Index bi = 0; bi < batches; ++bi) {
      for (Eigen::Index r = 0; r < bs; ++r) {
        const auto idx = static_cast<Eigen::Index>(order[static_cast<std::size_t>(bi * bs + r)]);
        auto [x1, x2] = two_views(Eigen::RowVectorXd(data.row(idx)), spec.aug, rng);
        v1.row(r) = x1;
        v2.row(r) = x2;
      }

      StepGradients g = ssl_gradients(nets, method, v1, v2);
      const double lr = opt.lr();
      nets.set_online_params(sgd_step(nets.online_params(), g.online, opt));
      if (nets.target_encoder && !method.stop_gradient)
        nets.target_encoder->set_params(nets.target_encoder->params() - lr * *g.target);
      if (method.target_ema) update_target(nets, method);
      if (nets.queue) nets.queue->enqueue(g.keys);

      result.batch_losses.push_back({epoch, static_cast<int>(bi), g.loss});
      epoch_total += g.loss;
    }
    result.epoch_loss.push_back(epoch_total / static_cast<double>(batches));
  }
  return result;
}

}  // namespace fedssl
