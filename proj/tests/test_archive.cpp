#include <gtest/gtest.h>

#include <fstream>

#include "badpatch/archive.hpp"
#include "badpatch/error.hpp"
#include "badpatch/inversion.hpp"
#include "badpatch/toy_diffusion.hpp"
#include "test_util.hpp"

using namespace badpatch;

TEST(Archive, RoundTripIsBitExact) {
  const auto dir = testutil::temp_dir("archive");
  Archive a;
  a.kind = "demo";
  a.meta = {{"answer", 42}, {"name", "x"}};
  a.tensors["alpha"] = testutil::random_tensor({3, 4, 5}, 1, -1e300, 1e300);
  a.tensors["beta"] = pack_vector({0.1, -0.0, 1e-310});
  write_archive(dir / "a.bpa", a);

  const Archive b = read_archive(dir / "a.bpa");
  EXPECT_EQ(b.kind, "demo");
  EXPECT_EQ(b.meta.at("answer"), 42);
  EXPECT_EQ(b.tensor("alpha"), a.tensors["alpha"]);
  const auto beta = unpack_vector(b.tensor("beta"));
  ASSERT_EQ(beta.size(), 3u);
  EXPECT_TRUE(std::signbit(beta[1]));
  EXPECT_EQ(beta[2], 1e-310);
  EXPECT_THROW(b.tensor("gamma"), ConfigError);
}

TEST(Archive, RejectsForeignAndTruncatedFiles) {
  const auto dir = testutil::temp_dir("archive-bad");
  {
    std::ofstream out(dir / "junk.bpa", std::ios::binary);
    out << "not an archive at all";
  }
  EXPECT_THROW(read_archive(dir / "junk.bpa"), ConfigError);
  EXPECT_THROW(read_archive(dir / "missing.bpa"), ConfigError);

  Archive a;
  a.kind = "demo";
  a.tensors["t"] = Tensor({1, 8, 8}, 1.0);
  write_archive(dir / "ok.bpa", a);
  const auto size = std::filesystem::file_size(dir / "ok.bpa");
  std::filesystem::resize_file(dir / "ok.bpa", size - 8);
  EXPECT_THROW(read_archive(dir / "ok.bpa"), ConfigError);
}

TEST(Archive, TrajectoryRoundTripIsBitExact) {
  const auto dir = testutil::temp_dir("trajectory");
  const ToyLinearDiffusion backend;
  const auto s = build_schedule(1000, 0.00085, 0.012, 10);
  const LatentState z0{testutil::random_tensor(backend.latent_shape(), 5, 0.0, 1.0), 0};
  const auto cond = backend.embed_text("a violet flower");
  auto pivots = pivotal_invert(z0, cond, s, 4, backend);
  NullTextConfig cfg;
  cfg.n_inner = 3;
  InversionTrajectory t = optimize_null_text(pivots, cond, backend.embed_text(""), s, backend, cfg);
  t.context = {{"prompt", "a violet flower"}};
  t.attachments["mask"] = Tensor({1, 16, 16}, 1.0);
  save_trajectory(dir / "t.bpa", t);

  const InversionTrajectory u = load_trajectory(dir / "t.bpa");
  ASSERT_EQ(u.pivot_latents.size(), t.pivot_latents.size());
  for (std::size_t i = 0; i < t.pivot_latents.size(); ++i) {
    EXPECT_EQ(u.pivot_latents[i].z, t.pivot_latents[i].z);
    EXPECT_EQ(u.pivot_latents[i].step, t.pivot_latents[i].step);
  }
  EXPECT_EQ(u.null_embeddings, t.null_embeddings);
  EXPECT_EQ(u.cond, t.cond);
  EXPECT_EQ(u.half_t, t.half_t);
  EXPECT_EQ(u.w, t.w);
  EXPECT_EQ(u.formula, t.formula);
  EXPECT_EQ(u.reconstruction_error, t.reconstruction_error);
  EXPECT_EQ(u.objective_history, t.objective_history);
  EXPECT_EQ(u.context, t.context);
  EXPECT_EQ(u.attachments, t.attachments);

  // Saving the loaded copy reproduces the same bytes.
  save_trajectory(dir / "u.bpa", u);
  std::ifstream a(dir / "t.bpa", std::ios::binary), b(dir / "u.bpa", std::ios::binary);
  const std::string bytes_a((std::istreambuf_iterator<char>(a)), {});
  const std::string bytes_b((std::istreambuf_iterator<char>(b)), {});
  EXPECT_EQ(bytes_a, bytes_b);
}

TEST(Archive, LoadTrajectoryRejectsOtherKinds) {
  const auto dir = testutil::temp_dir("trajectory-kind");
  Archive a;
  a.kind = "checkpoint";
  write_archive(dir / "c.bpa", a);
  EXPECT_THROW(load_trajectory(dir / "c.bpa"), ConfigError);
}
