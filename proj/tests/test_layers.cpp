#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "resvox/gradcheck.hpp"
#include "resvox/layers.hpp"

using namespace resvox;

namespace {

constexpr double kGradTol = 1e-4;

Tensor rand_tensor(Shape shape, Rng& rng, double lo = 0.1, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.vec()) {
    double mag = rng.uniform(lo, hi);
    v = rng.uniform() < 0.5 ? -mag : mag;
  }
  return t;
}

std::vector<Tensor> all_params(const ParameterStore& store) {
  std::vector<Tensor> out;
  for (const std::string& name : store.names()) out.push_back(store.get(name));
  return out;
}

}  // namespace

TEST_CASE("positional encoding starts at the [0,1,0,1] pattern") {
  Tensor pe = positional_encoding(4, 6);
  REQUIRE(pe.extent(0) == 4);
  REQUIRE(pe.extent(1) == 6);
  for (long j = 0; j < 6; ++j)
    REQUIRE(pe.at({0, j}) == (j % 2 == 0 ? 0.0 : 1.0));
  // position 1, pair 0: plain sin(1)/cos(1)
  REQUIRE(pe.at({1, 0}) == Catch::Approx(std::sin(1.0)).margin(1e-12));
  REQUIRE(pe.at({1, 1}) == Catch::Approx(std::cos(1.0)).margin(1e-12));
  // pair 1 frequency drops by 10000^(-2/6)
  double f1 = std::pow(10000.0, -2.0 / 6.0);
  REQUIRE(pe.at({1, 2}) == Catch::Approx(std::sin(f1)).margin(1e-12));
  REQUIRE(pe.at({1, 3}) == Catch::Approx(std::cos(f1)).margin(1e-12));
  REQUIRE_FALSE(pe.requires_grad());
}

TEST_CASE("linear layer computes x w + b with registered parameters") {
  ParameterStore store(5);
  Linear lin(store, "lin", 2, 3, "test");
  REQUIRE(store.has("lin.weight"));
  REQUIRE(store.has("lin.bias"));
  for (long i = 0; i < 6; ++i) lin.weight.data()[i] = double(i + 1);
  lin.bias.data()[0] = 10.0;
  Tensor x = Tensor::from({1, 2}, {1.0, 2.0});
  Tensor y = lin.forward(x);
  REQUIRE(y.at({0, 0}) == 1 * 1 + 2 * 4 + 10);
  REQUIRE(y.at({0, 1}) == 1 * 2 + 2 * 5);
  REQUIRE(y.at({0, 2}) == 1 * 3 + 2 * 6);
}

TEST_CASE("parameter store initialization is seeded and bounded") {
  ParameterStore a(9), b(9), c(10);
  Linear la(a, "l", 16, 8, "g");
  Linear lb(b, "l", 16, 8, "g");
  Linear lc(c, "l", 16, 8, "g");
  REQUIRE(la.weight.vec() == lb.weight.vec());
  REQUIRE(la.weight.vec() != lc.weight.vec());
  double bound = 1.0 / std::sqrt(16.0);
  for (double v : la.weight.vec()) {
    REQUIRE(v >= -bound);
    REQUIRE(v <= bound);
  }
  for (double v : la.bias.vec()) REQUIRE(v == 0.0);
  REQUIRE(a.total_parameters() == 16 * 8 + 8);
}

TEST_CASE("parameter store freeze bookkeeping") {
  ParameterStore store(1);
  Linear l1(store, "a", 2, 2, "backbone");
  Linear l2(store, "b", 2, 2, "tables");
  store.freeze_group("tables");
  REQUIRE_FALSE(store.frozen("a.weight"));
  REQUIRE(store.frozen("b.weight"));
  long seen = 0;
  store.for_each_trainable([&](const std::string& name, Tensor&) {
    REQUIRE(name.substr(0, 1) == "a");
    ++seen;
  });
  REQUIRE(seen == 2);
  store.unfreeze_all();
  REQUIRE_FALSE(store.frozen("b.weight"));
  REQUIRE_THROWS(store.freeze_group("no_such_group"));
  REQUIRE_THROWS(store.add("a.weight", {1}, "g", Init::zeros));
}

TEST_CASE("gru layer matches a hand-computed recurrence") {
  ParameterStore store(3);
  GruLayer gru(store, "gru", 1, 2, "test");
  auto set = [](Tensor t, std::vector<double> v) { t.vec() = std::move(v); };
  set(gru.w_z, {0.3, -0.2});
  set(gru.w_r, {0.1, 0.4});
  set(gru.w_h, {-0.5, 0.2});
  set(gru.u_z, {0.1, 0.0, 0.0, 0.1});
  set(gru.u_r, {0.2, 0.0, 0.0, 0.2});
  set(gru.u_h, {0.0, 0.3, 0.3, 0.0});
  set(gru.b_z, {0.05, -0.05});
  set(gru.b_r, {0.0, 0.1});
  set(gru.b_h, {0.1, 0.0});
  Tensor x = Tensor::from({2, 1}, {1.0, -0.5});
  Tensor h = gru.final_hidden(x);

  auto sig = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
  double h0 = 0.0, h1 = 0.0;
  for (long t = 0; t < 2; ++t) {
    double xt = (t == 0) ? 1.0 : -0.5;
    double z0 = sig(xt * 0.3 + h0 * 0.1 + 0.05);
    double z1 = sig(xt * -0.2 + h1 * 0.1 - 0.05);
    double r0 = sig(xt * 0.1 + h0 * 0.2 + 0.0);
    double r1 = sig(xt * 0.4 + h1 * 0.2 + 0.1);
    double c0 = std::tanh(xt * -0.5 + (r1 * h1) * 0.3 + 0.1);
    double c1 = std::tanh(xt * 0.2 + (r0 * h0) * 0.3 + 0.0);
    h0 = (1.0 - z0) * h0 + z0 * c0;
    h1 = (1.0 - z1) * h1 + z1 * c1;
  }
  REQUIRE(h.at({0, 0}) == Catch::Approx(h0).margin(1e-12));
  REQUIRE(h.at({0, 1}) == Catch::Approx(h1).margin(1e-12));
}

TEST_CASE("gru gradients pass finite differences") {
  ParameterStore store(4);
  GruLayer gru(store, "gru", 2, 3, "test");
  Rng rng(77);
  Tensor x = rand_tensor({3, 2}, rng);
  std::vector<Tensor> inputs = all_params(store);
  inputs.push_back(x);
  double err = grad_check([&]() { return sum_all(gru.final_hidden(x)); },
                          inputs);
  REQUIRE(err < kGradTol);
}

TEST_CASE("attention over a single position is identity weighting") {
  ParameterStore store(6);
  MultiHeadAttention mha(store, "att", 4, 4, 4, 2, 4, "test");
  Rng rng(8);
  Tensor x = rand_tensor({1, 1, 4}, rng);
  Tensor y = mha.forward(x, x);
  // with one key the softmax weight is 1, so the result is wo(wv(x))
  Tensor expect = mha.wo.forward(mha.wv.forward(x));
  for (long j = 0; j < 4; ++j)
    REQUIRE(y.at({0, 0, j}) == Catch::Approx(expect.at({0, 0, j})).margin(1e-12));
}

TEST_CASE("attention output ignores masked key positions") {
  ParameterStore store(6);
  MultiHeadAttention mha(store, "att", 4, 4, 4, 2, 4, "test");
  Rng rng(9);
  Tensor keys = rand_tensor({1, 5, 4}, rng);
  Tensor query = rand_tensor({1, 2, 4}, rng);
  Tensor mask = lengths_to_mask({3}, 5);
  Tensor masked = mha.forward(query, keys, mask);
  // zero out the padded keys entirely; the masked attention must not care
  Tensor keys_zeroed = keys.clone();
  for (long l = 3; l < 5; ++l)
    for (long j = 0; j < 4; ++j) keys_zeroed.at({0, l, j}) = 0.0;
  Tensor again = mha.forward(query, keys_zeroed, mask);
  for (long l = 0; l < 2; ++l)
    for (long j = 0; j < 4; ++j)
      REQUIRE(masked.at({0, l, j}) == again.at({0, l, j}));
}

TEST_CASE("attention gradients pass finite differences") {
  ParameterStore store(7);
  MultiHeadAttention mha(store, "att", 4, 4, 4, 2, 4, "test");
  Rng rng(10);
  Tensor x = rand_tensor({2, 3, 4}, rng);
  Tensor mask = lengths_to_mask({2, 3}, 3);
  std::vector<Tensor> inputs = all_params(store);
  inputs.push_back(x);
  double err = grad_check(
      [&]() { return sum_all(mha.forward(x, x, mask)); }, inputs);
  REQUIRE(err < kGradTol);
}

TEST_CASE("fft block: padded batch matches unbatched forward at real rows") {
  ParameterStore store(11);
  FftBlock block(store, "fft", 8, 12, 3, 2, 0.2, "test");
  RunMode inference;
  Rng rng(12);
  Tensor item0 = rand_tensor({1, 3, 8}, rng);
  Tensor item1 = rand_tensor({1, 5, 8}, rng);

  Tensor batch({2, 5, 8});
  for (long l = 0; l < 3; ++l)
    for (long j = 0; j < 8; ++j) batch.at({0, l, j}) = item0.at({0, l, j});
  for (long l = 0; l < 5; ++l)
    for (long j = 0; j < 8; ++j) batch.at({1, l, j}) = item1.at({0, l, j});
  Tensor mask = lengths_to_mask({3, 5}, 5);

  Tensor batched = block.forward(batch, mask, inference);
  Tensor alone0 = block.forward(item0, lengths_to_mask({3}, 3), inference);
  Tensor alone1 = block.forward(item1, lengths_to_mask({5}, 5), inference);

  for (long l = 0; l < 3; ++l)
    for (long j = 0; j < 8; ++j)
      REQUIRE(batched.at({0, l, j}) ==
              Catch::Approx(alone0.at({0, l, j})).margin(1e-12));
  for (long l = 0; l < 5; ++l)
    for (long j = 0; j < 8; ++j)
      REQUIRE(batched.at({1, l, j}) ==
              Catch::Approx(alone1.at({0, l, j})).margin(1e-12));
  // padded rows come out as exact zeros
  for (long l = 3; l < 5; ++l)
    for (long j = 0; j < 8; ++j) REQUIRE(batched.at({0, l, j}) == 0.0);
}

TEST_CASE("fft block gradients pass finite differences") {
  ParameterStore store(13);
  FftBlock block(store, "fft", 4, 6, 3, 2, 0.0, "test");
  RunMode inference;
  Rng rng(14);
  Tensor x = rand_tensor({2, 3, 4}, rng);
  Tensor mask = lengths_to_mask({2, 3}, 3);
  Tensor x_masked = apply_mask(x, mask);
  std::vector<Tensor> inputs = all_params(store);
  inputs.push_back(x);
  double err = grad_check(
      [&]() { return sum_all(block.forward(apply_mask(x, mask), mask,
                                           inference)); },
      inputs);
  REQUIRE(err < kGradTol);
  (void)x_masked;
}

TEST_CASE("variance predictor shape and masking") {
  ParameterStore store(15);
  VariancePredictor vp(store, "vp", 8, 6, 3, 0.5, "test");
  RunMode inference;
  Rng rng(16);
  Tensor x = rand_tensor({2, 4, 8}, rng);
  Tensor mask = lengths_to_mask({2, 4}, 4);
  Tensor p = vp.forward(apply_mask(x, mask), mask, inference);
  REQUIRE(p.rank() == 2);
  REQUIRE(p.extent(0) == 2);
  REQUIRE(p.extent(1) == 4);
  REQUIRE(p.at({0, 2}) == 0.0);
  REQUIRE(p.at({0, 3}) == 0.0);
  REQUIRE(p.at({0, 0}) != 0.0);
}

TEST_CASE("variance predictor gradients pass finite differences") {
  ParameterStore store(17);
  VariancePredictor vp(store, "vp", 4, 5, 3, 0.0, "test");
  RunMode inference;
  Rng rng(18);
  Tensor x = rand_tensor({1, 3, 4}, rng);
  std::vector<Tensor> inputs = all_params(store);
  inputs.push_back(x);
  double err = grad_check(
      [&]() { return sum_all(vp.forward(x, Tensor(), inference)); }, inputs);
  REQUIRE(err < kGradTol);
}

TEST_CASE("residual net with a zeroed head is the zero map") {
  ParameterStore store(19);
  ResidualNet net(store, "res", 3, 8, 6, 3, 0.0, "test");
  for (double& v : net.head.weight.vec()) v = 0.0;
  RunMode inference;
  Rng rng(20);
  Tensor cond = rand_tensor({1, 4, 3}, rng);
  Tensor emb = rand_tensor({1, 4, 8}, rng);
  Tensor r = net.forward(cond, emb, Tensor(), inference);
  REQUIRE(r.extent(0) == 1);
  REQUIRE(r.extent(1) == 4);
  REQUIRE(r.extent(2) == 8);
  for (double v : r.vec()) REQUIRE(v == 0.0);
}

TEST_CASE("residual net gradients pass finite differences") {
  ParameterStore store(21);
  ResidualNet net(store, "res", 2, 4, 5, 3, 0.0, "test");
  RunMode inference;
  Rng rng(22);
  Tensor cond = rand_tensor({1, 3, 2}, rng);
  Tensor emb = rand_tensor({1, 3, 4}, rng);
  std::vector<Tensor> inputs = all_params(store);
  inputs.push_back(cond);
  inputs.push_back(emb);
  double err = grad_check(
      [&]() { return sum_all(net.forward(cond, emb, Tensor(), inference)); },
      inputs);
  REQUIRE(err < kGradTol);
}

TEST_CASE("dropout wiring respects training mode and determinism") {
  Rng rng(23);
  Tensor x = rand_tensor({2, 3}, rng);
  RunMode inference;
  RunMode training{true, &rng};
  // inference never drops
  REQUIRE(apply_dropout(x, 0.5, inference).node() == x.node());
  // deterministic mode (the default) forces identity even in training
  REQUIRE(numeric_options().deterministic);
  REQUIRE(apply_dropout(x, 0.5, training).node() == x.node());
  numeric_options().deterministic = false;
  Tensor dropped = apply_dropout(x, 0.5, training);
  REQUIRE(dropped.node() != x.node());
  numeric_options().deterministic = true;
}

TEST_CASE("batch norm layer registers running buffers") {
  ParameterStore store(25);
  BatchNorm2dLayer bn(store, "bn", 3, "test");
  REQUIRE(store.has("bn.running_mean"));
  REQUIRE(store.has("bn.running_var"));
  REQUIRE(store.buffer_names() ==
          std::vector<std::string>{"bn.running_mean", "bn.running_var"});
  // buffers do not appear among trainables
  long count = 0;
  store.for_each_trainable([&](const std::string&, Tensor&) { ++count; });
  REQUIRE(count == 2);
  Rng rng(26);
  Tensor x = rand_tensor({2, 3, 4, 4}, rng);
  Tensor y = bn.forward(x, true);
  REQUIRE(y.extent(1) == 3);
  REQUIRE(bn.running_mean.vec() != std::vector<double>(3, 0.0));
}
