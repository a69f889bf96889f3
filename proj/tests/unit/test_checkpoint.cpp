#include <filesystem>

#include "doctest.h"
#include "mhkd/checkpoint.hpp"
#include "mhkd/errors.hpp"
#include "test_util.hpp"

using namespace mhkd;

namespace {

bool bit_equal(const Tensor<float>& a, const Tensor<float>& b) {
  return mhkd::testing::bit_equal(a.data(), b.data());
}

AuxHeadSpec small_head() {
  AuxHeadSpec h;
  h.num_conv = 1;
  h.conv_channels = 8;
  h.fc_hidden = 16;
  return h;
}

// A network whose BN statistics have moved away from their init values.
Network<float> warmed(const NetworkSpec& spec, std::uint64_t seed) {
  Network<float> net(spec, TaskSpec{}, seed);
  Rng rng(seed + 1);
  Tensor<float> x(Shape{4, 3, 32, 32});
  for (float& v : x.data()) v = static_cast<float>(rng.normal());
  net.forward_with_taps(nullptr, x, {}, Mode::kTrain);
  return net;
}

Checkpoint full_checkpoint() {
  Checkpoint c{warmed(tiny_student_spec(), 3), std::nullopt, std::nullopt};
  HeadBundle h;
  h.spec = small_head();
  auto teacher = tiny_teacher_spec();
  for (int u : {1, 3}) {
    h.units.push_back(u);
    h.teacher.emplace_back(h.spec, teacher.unit_channels(u), 10 + u);
    h.student.emplace_back(h.spec, tiny_student_spec().unit_channels(u), 20 + u);
  }
  c.heads = std::move(h);
  TrainState s;
  s.epoch = 7;
  s.step = 123456789012LL;
  s.run_seed = 42;
  s.seeds = SeedStreams::from(42);
  s.velocity = {{1.0f, -2.5f}, {}, {3.25f}};
  c.state = std::move(s);
  return c;
}

Tensor<float> probe_input() {
  Rng rng(99);
  Tensor<float> x(Shape{3, 3, 32, 32});
  for (float& v : x.data()) v = static_cast<float>(rng.normal());
  return x;
}

}  // namespace

TEST_CASE("save -> load -> save is byte-identical") {
  SUBCASE("network only") {
    Checkpoint c{warmed(tiny_teacher_spec(), 1), std::nullopt, std::nullopt};
    auto bytes = serialize(c);
    CHECK(serialize(deserialize(bytes)) == bytes);
  }
  SUBCASE("with heads and training state") {
    auto c = full_checkpoint();
    auto bytes = serialize(c);
    auto back = deserialize(bytes);
    CHECK(serialize(back) == bytes);
    REQUIRE(back.heads.has_value());
    CHECK(back.heads->units == std::vector<int>{1, 3});
    CHECK(back.heads->spec == small_head());
    REQUIRE(back.state.has_value());
    CHECK(back.state->step == 123456789012LL);
    CHECK(back.state->seeds.augment == SeedStreams::from(42).augment);
    CHECK(back.state->velocity == c.state->velocity);
  }
  SUBCASE("through files") {
    auto dir = std::filesystem::temp_directory_path() / "mhkd_ckpt_test";
    auto c = full_checkpoint();
    save_checkpoint(c, dir / "a.ckpt");
    save_checkpoint(load_checkpoint(dir / "a.ckpt"), dir / "b.ckpt");
    CHECK(serialize(load_checkpoint(dir / "a.ckpt")) == serialize(load_checkpoint(dir / "b.ckpt")));
    CHECK(std::filesystem::file_size(dir / "a.ckpt") == std::filesystem::file_size(dir / "b.ckpt"));
    std::filesystem::remove_all(dir);
  }
}

TEST_CASE("loaded networks evaluate identically") {
  auto c = full_checkpoint();
  auto back = deserialize(serialize(c));
  auto x = probe_input();
  std::vector<int> units{1, 3};
  auto a = c.network.infer(x, units), b = back.network.infer(x, units);
  CHECK(bit_equal(a.logits, b.logits));
  for (std::size_t j = 0; j < 2; ++j) {
    CHECK(bit_equal(c.heads->student[j].infer(a.taps[j].tensor),
                    back.heads->student[j].infer(b.taps[j].tensor)));
  }
  CHECK(back.network.count_params() == c.network.count_params());
}

TEST_CASE("stripping heads keeps the deployable network") {
  auto c = full_checkpoint();
  auto stripped = strip_heads(c);
  CHECK_FALSE(stripped.heads.has_value());
  CHECK_FALSE(stripped.state.has_value());
  auto x = probe_input();
  CHECK(bit_equal(c.network.infer(x).logits, stripped.network.infer(x).logits));
  CHECK(bit_equal(deserialize(serialize(stripped)).network.infer(x).logits,
                  c.network.infer(x).logits));
  CHECK(serialize(stripped).size() < serialize(c).size());
}

TEST_CASE("corrupt checkpoints are rejected") {
  auto bytes = serialize(full_checkpoint());
  SUBCASE("version mismatch") {
    auto b = bytes;
    b[8] = kCheckpointVersion + 1;
    CHECK_THROWS_WITH_AS(deserialize(b), doctest::Contains("unsupported version"), CheckpointError);
  }
  SUBCASE("bad magic") {
    auto b = bytes;
    b[0] = 'X';
    CHECK_THROWS_AS(deserialize(b), CheckpointError);
  }
  SUBCASE("truncated files fail loudly") {
    for (std::size_t n = 0; n < bytes.size(); n += 97) {
      std::vector<std::uint8_t> b(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(n));
      CHECK_THROWS_AS(deserialize(b), CheckpointError);
    }
    std::vector<std::uint8_t> b(bytes.begin(), bytes.end() - 1);
    CHECK_THROWS_AS(deserialize(b), CheckpointError);
  }
  SUBCASE("trailing garbage") {
    auto b = bytes;
    b.push_back(0);
    CHECK_THROWS_AS(deserialize(b), CheckpointError);
  }
  SUBCASE("missing file") {
    CHECK_THROWS_AS(load_checkpoint("/nonexistent/x.ckpt"), CheckpointError);
  }
}
