#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <map>

#include "rlaif/checkpoint.hpp"
#include "rlaif/model.hpp"
#include "grad_cases.hpp"
#include "support.hpp"

using namespace rlaif;

using namespace rlaif::testing;

TEST(ModelInit, LayoutMatchesConfig) {
  const auto c = default_model_config(HeadKind::token);
  const auto ck = init_checkpoint(c, 1);
  const auto layout = parameter_layout(c);
  ASSERT_EQ(ck.params.size(), layout.size());
  for (std::size_t i = 0; i < layout.size(); ++i) {
    EXPECT_EQ(ck.params[i].name, layout[i].first);
    EXPECT_EQ(ck.params[i].value.shape(), layout[i].second);
  }
  EXPECT_EQ(ck.param("tok_emb").shape(), (Shape{vocabulary().size(), 64}));
  EXPECT_EQ(ck.param("pos_emb").shape(), (Shape{256, 64}));
  EXPECT_EQ(ck.param("head.weight").shape(), (Shape{64, vocabulary().size()}));
}

TEST(ModelInit, DeterministicPerSeed) {
  const auto c = tiny_config(HeadKind::token);
  EXPECT_EQ(init_checkpoint(c, 3), init_checkpoint(c, 3));
  EXPECT_NE(init_checkpoint(c, 3), init_checkpoint(c, 4));
}

TEST(ModelInit, HeadSpecificStart) {
  const auto reg = init_checkpoint(tiny_config(HeadKind::regression), 1);
  EXPECT_EQ(reg.param("head.weight").shape(), (Shape{8, 12}));
  auto zeroed = reg;
  for (double& v : zeroed.param("head.weight").values()) v = 0.0;
  for (double v : reward_forward(zeroed, Tokens{0, 1, 2})) EXPECT_EQ(v, kScoreMid);
  const auto val = init_checkpoint(tiny_config(HeadKind::value), 1);
  for (double v : value_forward(val, Tokens{0, 1, 2})) EXPECT_EQ(v, 0.0);
}

TEST(ModelConfigCheck, RejectsIndivisibleWidth) {
  auto c = tiny_config(HeadKind::token);
  c.head_count = 3;
  EXPECT_THROW(init_checkpoint(c, 1), ValidationError);
}

TEST(LmForward, RowsAreDistributions) {
  const auto ck = spread_checkpoint(tiny_config(HeadKind::token), 5);
  const NDArray lp = lm_forward(ck, Tokens{0, 3, 1, 4, 2});
  ASSERT_EQ(lp.shape(), (Shape{5, 5}));
  for (std::size_t r = 0; r < 5; ++r) {
    double z = 0.0;
    for (std::size_t c = 0; c < 5; ++c) z += std::exp(lp(r, c));
    EXPECT_NEAR(z, 1.0, 1e-12);
  }
}

TEST(LmForward, Causal) {
  const auto ck = spread_checkpoint(tiny_config(HeadKind::token), 6);
  const Tokens a{0, 3, 1, 4, 2, 2};
  for (std::size_t t = 0; t < a.size(); ++t) {
    Tokens b = a;
    b[t] = (b[t] + 1) % 5;
    const NDArray la = lm_forward(ck, a);
    const NDArray lb = lm_forward(ck, b);
    for (std::size_t r = 0; r < t; ++r)
      for (std::size_t c = 0; c < 5; ++c) EXPECT_EQ(la(r, c), lb(r, c)) << "row " << r << " changed by token " << t;
    bool later_changed = false;
    for (std::size_t c = 0; c < 5; ++c) later_changed = later_changed || la(t, c) != lb(t, c);
    EXPECT_TRUE(later_changed);
  }
}

TEST(LmForward, ZeroHeadIsUniform) {
  auto ck = spread_checkpoint(tiny_config(HeadKind::token), 7);
  for (double& v : ck.param("head.weight").values()) v = 0.0;
  for (double& v : ck.param("head.bias").values()) v = 0.0;
  const NDArray lp = lm_forward(ck, Tokens{1, 2, 3});
  for (double v : lp.values()) EXPECT_NEAR(v, -std::log(5.0), 1e-15);
  EXPECT_NEAR(perplexity(ck, Tokens{1}, Tokens{4, 0, 2}), 5.0, 1e-12);
}

TEST(LmForward, RejectsBadInput) {
  const auto ck = init_checkpoint(tiny_config(HeadKind::token), 1);
  EXPECT_THROW(lm_forward(ck, Tokens{}), ValidationError);
  EXPECT_THROW(lm_forward(ck, Tokens(9, 0)), ValidationError);
  EXPECT_THROW(lm_forward(ck, Tokens{5}), ValidationError);
  const auto reg = init_checkpoint(tiny_config(HeadKind::regression), 1);
  EXPECT_THROW(lm_forward(reg, Tokens{1}), ValidationError);
  EXPECT_THROW(value_forward(reg, Tokens{1}), ValidationError);
}

TEST(ResponseLogProb, MatchesFullSequenceRows) {
  const auto ck = spread_checkpoint(tiny_config(HeadKind::token), 8);
  const Tokens context{0, 4, 1};
  const Tokens response{3, 3, 2};
  const auto lp = response_log_prob(ck, context, response);
  // Oracle: read each response token off the full-sequence forward.
  Tokens full = context;
  full.insert(full.end(), response.begin(), response.end());
  const NDArray rows = lm_forward(ck, full);
  double total = 0.0;
  for (std::size_t i = 0; i < response.size(); ++i) {
    const double v = rows(context.size() - 1 + i, static_cast<std::size_t>(response[i]));
    EXPECT_NEAR(lp.per_token[i], v, 1e-12);
    total += v;
  }
  EXPECT_NEAR(lp.total, total, 1e-12);
}

TEST(ResponseLogProb, LengthTwoResponsesSumToOne) {
  const auto ck = spread_checkpoint(tiny_config(HeadKind::token), 9);
  const Tokens context{1, 0};
  double z = 0.0;
  for (int a = 0; a < 5; ++a)
    for (int b = 0; b < 5; ++b) z += std::exp(response_log_prob(ck, context, Tokens{a, b}).total);
  EXPECT_NEAR(z, 1.0, 1e-12);
}

TEST(ResponseLogProb, RejectsOverflowAndEmpty) {
  const auto ck = init_checkpoint(tiny_config(HeadKind::token), 1);
  EXPECT_THROW(response_log_prob(ck, Tokens{0}, Tokens{}), ValidationError);
  EXPECT_THROW(response_log_prob(ck, Tokens{}, Tokens{1}), ValidationError);
  EXPECT_THROW(response_log_prob(ck, Tokens(5, 0), Tokens(4, 1)), ValidationError);
  EXPECT_NO_THROW(response_log_prob(ck, Tokens(4, 0), Tokens(4, 1)));
}

TEST(Perplexity, Fixtures) {
  EXPECT_DOUBLE_EQ(perplexity_from_log_prob({0.0, {0.0, 0.0, 0.0}}), 1.0);
  const double l11 = -std::log(11.0);
  EXPECT_NEAR(perplexity_from_log_prob({3 * l11, {l11, l11, l11}}), 11.0, 1e-12);
  const double a = std::log(0.5), b = std::log(0.125);
  EXPECT_NEAR(perplexity_from_log_prob({a + b, {a, b}}), 4.0, 1e-12);
  EXPECT_THROW(perplexity_from_log_prob({}), ValidationError);
}

TEST(Generate, GreedyFollowsArgmax) {
  const auto ck = spread_checkpoint(tiny_config(HeadKind::token), 10);
  SamplingConfig s;
  s.greedy = true;
  s.max_tokens = 5;
  const Tokens context{0, 1};
  const Tokens out = generate(ck, context, s);
  Tokens seq = context;
  for (int tok : out) {
    const NDArray lp = lm_forward(ck, seq);
    std::size_t best = 0;
    for (std::size_t c = 1; c < 5; ++c)
      if (lp(seq.size() - 1, c) > lp(seq.size() - 1, best)) best = c;
    EXPECT_EQ(tok, static_cast<int>(best));
    seq.push_back(tok);
  }
  EXPECT_TRUE(out.size() == 5 || out.back() == vocabulary().end_of_turn());
}

TEST(Generate, LimitsAndDeterminism) {
  const auto ck = spread_checkpoint(tiny_config(HeadKind::token), 11);
  SamplingConfig s;
  s.max_tokens = 20;
  s.seed = 3;
  const Tokens context{0, 1, 3};
  const Tokens a = generate(ck, context, s);
  EXPECT_EQ(a, generate(ck, context, s));
  EXPECT_LE(context.size() + a.size(), 8u);
  for (std::size_t i = 0; i + 1 < a.size(); ++i) EXPECT_NE(a[i], vocabulary().end_of_turn());
  EXPECT_THROW(generate(ck, Tokens(8, 0), s), ValidationError);
  s.temperature = 0.0;
  EXPECT_THROW(generate(ck, context, s), ValidationError);
}

TEST(Generate, ColdTemperatureAndTopOneAreGreedy) {
  const auto ck = spread_checkpoint(tiny_config(HeadKind::token), 12);
  SamplingConfig greedy;
  greedy.greedy = true;
  greedy.max_tokens = 6;
  const Tokens context{4};
  const Tokens expect = generate(ck, context, greedy);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    SamplingConfig cold;
    cold.temperature = 1e-6;
    cold.max_tokens = 6;
    cold.seed = seed;
    EXPECT_EQ(generate(ck, context, cold), expect);
    SamplingConfig top1;
    top1.top_k = 1;
    top1.max_tokens = 6;
    top1.seed = seed;
    EXPECT_EQ(generate(ck, context, top1), expect);
  }
}

// First-token frequencies against the model's own distribution after
// temperature and top-k, within three standard errors.
TEST(Generate, SamplingFrequencies) {
  const auto ck = spread_checkpoint(tiny_config(HeadKind::token), 13, 1.0);
  const Tokens context{0, 3};
  const NDArray lp = lm_forward(ck, context);
  struct Case {
    double temperature;
    std::size_t top_k;
  };
  for (const Case cs : {Case{1.0, 0}, Case{0.5, 0}, Case{1.0, 2}, Case{2.0, 3}}) {
    // Oracle: p_i proportional to exp(lp_i / T) over the k most likely tokens.
    std::vector<std::pair<double, std::size_t>> ranked;
    for (std::size_t c = 0; c < 5; ++c) ranked.push_back({lp(1, c), c});
    std::sort(ranked.rbegin(), ranked.rend());
    const std::size_t keep = cs.top_k == 0 ? 5 : cs.top_k;
    std::vector<double> expect(5, 0.0);
    double z = 0.0;
    for (std::size_t r = 0; r < keep; ++r) z += expect[ranked[r].second] = std::exp(ranked[r].first / cs.temperature);
    for (double& p : expect) p /= z;

    const int n = 4000;
    std::vector<int> counts(5, 0);
    for (int i = 0; i < n; ++i) {
      SamplingConfig s;
      s.temperature = cs.temperature;
      s.top_k = cs.top_k;
      s.max_tokens = 1;
      s.seed = derive_seed(77, {static_cast<std::uint64_t>(i)});
      ++counts[static_cast<std::size_t>(generate(ck, context, s).at(0))];
    }
    for (std::size_t c = 0; c < 5; ++c) {
      const double freq = static_cast<double>(counts[c]) / n;
      const double se = std::sqrt(expect[c] * (1 - expect[c]) / n);
      if (expect[c] == 0.0) {
        EXPECT_EQ(counts[c], 0);
      } else {
        EXPECT_LE(std::abs(freq - expect[c]), 3 * se) << "T=" << cs.temperature << " k=" << cs.top_k << " token " << c;
      }
    }
  }
}

TEST(RewardForward, PoolingModes) {
  auto c = tiny_config(HeadKind::regression);
  const auto ck = spread_checkpoint(c, 14);
  const Tokens a{0, 1, 2, 3};
  Tokens b = a;
  b[0] = 4;
  // Final-position pooling still sees every position through attention.
  EXPECT_NE(reward_forward(ck, a), reward_forward(ck, b));
  auto mean_ck = ck;
  mean_ck.config.pooling = Pooling::mean;
  EXPECT_NE(reward_forward(mean_ck, a), reward_forward(ck, a));
  // Mean pooling of a single token equals final pooling.
  EXPECT_EQ(reward_forward(mean_ck, Tokens{2}), reward_forward(ck, Tokens{2}));
}

TEST(ModelGradient, AllHeadsMatchFiniteDifferences) {
  const Tokens context{0, 3, 5, 1};
  const Tokens response{7, 2, 9};
  for (HeadKind head : {HeadKind::token, HeadKind::regression, HeadKind::value}) {
    const auto ck = spread_checkpoint(tiny_config(head, 11, 16, 2), 15 + static_cast<int>(head), 0.3);
    const double err = grad_check(
        [&](Tape& t, std::span<const Var> vars) {
          BoundModel m = bind_leaves(ck, vars);
          switch (head) {
            case HeadKind::token:
              return sum(response_token_log_probs(m, context, response));
            case HeadKind::regression: {
              Var out = reward_outputs(m, context);
              return sum(mul(out, out));
            }
            case HeadKind::value:
            default: {
              Var v = value_outputs(m, context);
              return sum(mul(v, t.constant(NDArray::vector({1.0, -2.0, 0.5, 3.0}))));
            }
          }
        },
        values_of(ck));
    EXPECT_LT(err, 1e-5) << head_kind_name(head);
  }
}

TEST(Training, AccumulateAndStep) {
  const auto c = tiny_config(HeadKind::token);
  auto ck = spread_checkpoint(c, 16);
  const Tokens context{0, 1};
  const Tokens response{3, 2};
  const double before = response_log_prob(ck, context, response).total;
  Optimizer opt({0.05, 0, 0.0});
  for (int step = 0; step < 20; ++step) {
    Tape tape;
    BoundModel m = bind(tape, ck, true);
    Var loss = scale(sum(response_token_log_probs(m, context, response)), -1.0);
    auto grads = tape.backward(loss);
    GradientAccumulator acc;
    acc.add(parameter_gradients(grads, m), 1.0);
    opt.step(ck, acc.sum());
  }
  EXPECT_GT(response_log_prob(ck, context, response).total, before + 1.0);
}

TEST(Checkpoint, ByteIdenticalRoundTrip) {
  auto ck = spread_checkpoint(tiny_config(HeadKind::regression), 17);
  ck.meta = {42, 3, 0.125, "dev mse"};
  const auto bytes = encode_checkpoint(ck);
  const Checkpoint back = decode_checkpoint(bytes);
  EXPECT_EQ(back, ck);
  EXPECT_EQ(encode_checkpoint(back), bytes);

  const auto path = std::filesystem::temp_directory_path() / "rlaif_model_test.ckpt";
  save_checkpoint(ck, path);
  EXPECT_EQ(load_checkpoint(path), ck);
  std::filesystem::remove(path);
}

TEST(Checkpoint, LittleEndianEncoding) {
  auto ck = init_checkpoint(tiny_config(HeadKind::value), 1);
  ck.meta = {0x0102030405060708ULL, 0, 1.0, ""};
  const auto bytes = encode_checkpoint(ck);
  ASSERT_GT(bytes.size(), 80u);
  EXPECT_EQ(std::string(bytes.data(), 8), "RLAIFCKP");
  auto byte = [&](std::size_t i) { return static_cast<unsigned char>(bytes[i]); };
  // version
  EXPECT_EQ(byte(8), 1);
  EXPECT_EQ(byte(11), 0);
  // seed sits after magic, version, two u32 enums and six u64 sizes
  const std::size_t seed_at = 8 + 4 + 8 + 48;
  for (std::size_t i = 0; i < 8; ++i) EXPECT_EQ(byte(seed_at + i), 8 - i);
  // criterion 1.0 = 0x3FF0000000000000
  const std::size_t crit_at = seed_at + 16;
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(byte(crit_at + i), 0);
  EXPECT_EQ(byte(crit_at + 6), 0xF0);
  EXPECT_EQ(byte(crit_at + 7), 0x3F);
}

TEST(Checkpoint, EveryTruncationRejected) {
  const auto bytes = encode_checkpoint(init_checkpoint(tiny_config(HeadKind::value, 3, 4), 1));
  for (std::size_t n = 0; n < bytes.size(); ++n) {
    std::vector<char> cut(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(n));
    EXPECT_THROW(decode_checkpoint(cut), FormatError) << n;
  }
}

TEST(Checkpoint, VersionShapeAndChecksumErrors) {
  const auto ck = init_checkpoint(tiny_config(HeadKind::token), 1);
  auto bytes = encode_checkpoint(ck);

  auto bumped = bytes;
  bumped[8] = 2;
  try {
    decode_checkpoint(bumped);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("unsupported checkpoint version 2"), std::string::npos);
  }

  auto flipped = bytes;
  flipped[bytes.size() - 20] ^= 0x01;
  try {
    decode_checkpoint(flipped);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("checksum"), std::string::npos);
  }

  auto wrong = ck;
  wrong.params[0].value = NDArray({4, 8});
  try {
    decode_checkpoint(encode_checkpoint(wrong));
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("tok_emb"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("[5x8]"), std::string::npos);
  }

  auto trailing = bytes;
  trailing.push_back(0);
  EXPECT_THROW(decode_checkpoint(trailing), FormatError);
  EXPECT_THROW(load_checkpoint("/nonexistent/model.ckpt"), std::runtime_error);
}

TEST(ModelGradient, ComposedLossesOverSeeds) {
  for (const auto& c : rlaif::testing::kCompositeCases)
    for (std::uint64_t seed = 0; seed < 3; ++seed) EXPECT_LT(c.error(seed), 1e-5) << c.name << " seed " << seed;
}
