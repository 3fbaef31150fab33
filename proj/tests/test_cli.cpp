#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

#include "cli.hpp"
#include "csdm/error.hpp"
#include "csdm/io.hpp"
#include "csdm/pipeline.hpp"

using namespace csdm;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

class TempDir {
 public:
  TempDir() {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    path_ = fs::temp_directory_path() / (std::string("csdm-") + info->test_suite_name() + "-" + info->name());
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  std::string operator/(const std::string& name) const { return (path_ / name).string(); }

 private:
  fs::path path_;
};

struct CliResult {
  int code;
  std::string out, err;
};

CliResult run_cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string idx_header(std::uint32_t count, std::uint32_t rows, std::uint32_t cols) {
  std::string b;
  for (std::uint32_t v : {io::kIdxImageMagic, count, rows, cols})
    for (int shift = 24; shift >= 0; shift -= 8) b.push_back(char((v >> shift) & 0xff));
  return b;
}

}  // namespace

// ---------------------------------------------------------------- idx

TEST(Idx, ParsesHandCraftedImage) {
  std::string b = idx_header(1, 2, 2);
  for (int v : {0, 255, 128, 64}) b.push_back(char(v));
  const auto ds = io::parse_idx_images(b);
  ASSERT_EQ(ds.images.size(), 1u);
  EXPECT_EQ(ds.width, 2u);
  EXPECT_EQ(ds.height, 2u);
  EXPECT_EQ(ds.images[0], (Vector{0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0}));
}

TEST(Idx, RejectsTruncatedAndBadMagic) {
  std::string b = idx_header(2, 2, 2) + std::string(5, '\0');
  try {
    io::parse_idx_images(b);
    FAIL() << "expected IoError";
  } catch (const IoError& e) {
    const std::string what = e.what();
    EXPECT_NE(what.find("expected 8"), std::string::npos) << what;
    EXPECT_NE(what.find("got 5"), std::string::npos) << what;
  }
  std::string bad = idx_header(1, 1, 1) + std::string(1, '\0');
  bad[3] = 0x01;
  EXPECT_THROW(io::parse_idx_images(bad), IoError);
  EXPECT_THROW(io::parse_idx_images("abc"), IoError);
}

TEST(Idx, WriterRoundTripIsByteIdentical) {
  std::string b = idx_header(3, 4, 5);
  for (int i = 0; i < 60; ++i) b.push_back(char((i * 37) % 256));
  EXPECT_EQ(io::idx_image_bytes(io::parse_idx_images(b)), b);
  TempDir dir;
  io::write_idx_images(dir / "x.idx", io::parse_idx_images(b));
  EXPECT_EQ(io::read_text_file(dir / "x.idx"), b);
}

// ---------------------------------------------------------------- upscale

TEST(Upscale, SinglePixelDoublesToFour) {
  io::ImageDataset ds{{{0.0, 1.0, 0.0, 0.0}}, 2, 2};
  const auto up = io::upscale_nearest(ds, 4, 4);
  EXPECT_EQ(std::count(up.images[0].begin(), up.images[0].end(), 1.0), 4);
  EXPECT_EQ(up.images[0][2], 1.0);
  EXPECT_EQ(up.images[0][7], 1.0);
  EXPECT_EQ(io::upscale_nearest(ds, 2, 2).images, ds.images);
  EXPECT_THROW(io::upscale_nearest(ds, 1, 2), InvalidArgument);
}

TEST(Upscale, PreservesSparsityFraction) {
  const auto ds = io::synth_stroke_images(200, 28, 28, 5);
  for (auto [w, h] : {std::pair{56, 56}, std::pair{45, 45}, std::pair{64, 40}}) {
    const auto up = io::upscale_nearest(ds, w, h);
    // Counting oracle over both datasets.
    std::size_t small_before = 0, small_after = 0;
    for (const auto& img : ds.images)
      for (double v : img) small_before += v < 0.05;
    for (const auto& img : up.images)
      for (double v : img) small_after += v < 0.05;
    const double before = small_before / (200.0 * 28 * 28), after = small_after / (200.0 * w * h);
    EXPECT_DOUBLE_EQ(io::near_zero_fraction(up), after);
    EXPECT_LE(std::abs(after - before), 0.02) << w << "x" << h;
  }
  const double frac = io::near_zero_fraction(ds);
  EXPECT_GT(frac, 0.6);
  EXPECT_LT(frac, 0.95);
}

// ---------------------------------------------------------------- numeric csv

TEST(NumericRows, ParsesAndRejects) {
  const auto rows = io::parse_numeric_rows("1, 2.5,-3e-2\n\n4,5,6\r\n");
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0], (Vector{1.0, 2.5, -0.03}));
  EXPECT_THROW(io::parse_numeric_rows("1,2\n3\n"), IoError);
  EXPECT_THROW(io::parse_numeric_rows("1,x\n"), IoError);
  EXPECT_THROW(io::parse_numeric_rows("1,,2\n"), IoError);
  EXPECT_THROW(io::load_numeric_rows("/nonexistent/rows.csv"), IoError);
}

// ---------------------------------------------------------------- reports

TEST(EmitReport, WritesReportAndCompanions) {
  TempDir dir;
  const json report = {{"a", 1}, {"b", {1.5, 2.5}}};
  pipeline::SweepResult empty;
  const auto files = io::emit_report(dir / "sub", report, {{"sweep.csv", pipeline::sweep_to_csv(empty)}});
  ASSERT_EQ(files.size(), 2u);
  EXPECT_EQ(json::parse(io::read_text_file(files[0])), report);
  EXPECT_EQ(io::read_text_file(files[1]), "m,cost,diffusion_steps,fista_steps\n");
  EXPECT_THROW(io::emit_report("/proc/forbidden-dir", report), IoError);
}

// ---------------------------------------------------------------- configs

TEST(Config, MinimalConfigGetsDefaults) {
  const json e = cli::effective_config("pipeline", json::object());
  EXPECT_EQ(e["d"], 1024);
  EXPECT_EQ(e["m"], 256);
  EXPECT_EQ(e["sampler"]["kind"], "stochastic");
  const json s = cli::effective_config("sketch", json::object());
  EXPECT_EQ(s["m"], 256);
  EXPECT_EQ(s["write_matrix"], false);
}

TEST(Config, RejectionsCarryFieldPaths) {
  auto path_of = [](const std::string& sub, const json& j) {
    try {
      cli::effective_config(sub, j);
    } catch (const ConfigError& e) {
      return e.path();
    }
    return std::string("<accepted>");
  };
  EXPECT_EQ(path_of("pipeline", {{"m", 2000}}), "m");
  EXPECT_EQ(path_of("sketch", {{"m", 1024}, {"d", 1024}}), "m");
  EXPECT_EQ(path_of("pipeline", {{"sampler", {{"stepz", 3}}}}), "sampler.stepz");
  EXPECT_EQ(path_of("recover", {{"fista", {{"tol", "small"}}}}), "fista.tol");
  EXPECT_EQ(path_of("sweep-m", {{"d", 100}, {"sparsity", 2}, {"grid", {10, 5}}}), "grid[1]");
  EXPECT_EQ(path_of("ssa", {{"weights", {"equal", "max-sharpe"}}}), "weights[1]");
  EXPECT_EQ(path_of("ssa", {{"predictor", {{"input", "lagged"}}}}), "predictor.input");
  EXPECT_EQ(path_of("make-data", {{"kind", "sparse"}, {"periods", 3}}), "periods");
  EXPECT_EQ(path_of("bench", {{"mode", "arithmetic"}, {"t_cs", 0.1}, {"m", 1}, {"d", 2}}), "t_diff_m");
  EXPECT_EQ(path_of("sample", json::object()), "model");
  EXPECT_EQ(path_of("train", {{"train", {{"steps", 0}}}}), "train");
}

TEST(Config, EffectiveConfigIsAFixedPoint) {
  const std::vector<std::pair<std::string, json>> cases = {
      {"sketch", json::object()},
      {"recover", {{"lambda", {{"policy", "universal"}, {"value", 0.01}}}}},
      {"train", {{"m", 8}}},
      {"sample", {{"model", "m.bin"}}},
      {"pipeline", {{"lambda", {{"policy", "fixed"}, {"value", 0.1}}}}},
      {"sweep-m", {{"d", 64}, {"sparsity", 2}, {"model", "measured"}}},
      {"pca", {{"factors_csv", "f.csv"}}},
      {"ssa", {{"stressed", {"F1", 2}}, {"generated", {{"enabled", true}}}}},
      {"bench", {{"mode", "pipeline"}, {"pipeline", {{"d", 64}, {"m", 16}}}}},
      {"make-data", {{"kind", "idx"}, {"path", "x.idx"}, {"upscale_width", 56}, {"upscale_height", 56}}},
  };
  ASSERT_EQ(cases.size(), cli::subcommand_names().size());
  for (const auto& [sub, cfg] : cases) {
    const json once = cli::effective_config(sub, cfg);
    EXPECT_EQ(cli::effective_config(sub, once), once) << sub;
  }
}

// ---------------------------------------------------------------- runs

TEST(Cli, EffectiveConfigReproducesTheRun) {
  TempDir dir;
  const std::string cfg = dir / "cfg.json";
  io::write_text_file(cfg, R"({"m": 20, "d": 60, "instances": 3, "sparsity": 2, "noise": 0.01})");
  auto a = run_cli({"recover", "--config", cfg, "--out", dir / "a", "--seed", "7"});
  ASSERT_EQ(a.code, 0) << a.err;
  EXPECT_NE(a.out.find("report.json"), std::string::npos);
  EXPECT_NE(a.out.find("effective-config.json"), std::string::npos);
  auto b = run_cli({"recover", "--config", dir / "a/effective-config.json", "--out", dir / "b"});
  ASSERT_EQ(b.code, 0) << b.err;
  EXPECT_EQ(io::read_text_file(dir / "a/report.json"), io::read_text_file(dir / "b/report.json"));
  EXPECT_EQ(io::read_text_file(dir / "a/x_hat.csv"), io::read_text_file(dir / "b/x_hat.csv"));
  EXPECT_EQ(json::parse(io::read_text_file(dir / "a/effective-config.json"))["seed"], 7);
}

TEST(Cli, PipelineRerunMatchesExceptTiming) {
  TempDir dir;
  const std::string cfg = dir / "cfg.json";
  io::write_text_file(cfg, R"({"d": 32, "m": 12, "sparsity": 2, "n_train": 20, "n_generate": 6,
                               "n_floor": 5, "score": "analytic-mixture", "sampler": {"steps": 50}})");
  for (const char* out : {"a", "b"}) ASSERT_EQ(run_cli({"pipeline", "--config", cfg, "--out", dir / out}).code, 0);
  const json a = json::parse(io::read_text_file(dir / "a/report.json"));
  const json b = json::parse(io::read_text_file(dir / "b/report.json"));
  EXPECT_EQ(pipeline::strip_timing(a).dump(), pipeline::strip_timing(b).dump());
  EXPECT_EQ(io::read_text_file(dir / "a/errors.csv"), io::read_text_file(dir / "b/errors.csv"));
}

TEST(Cli, ExitCodes) {
  TempDir dir;
  EXPECT_EQ(run_cli({"sketch", "--out", dir / "ok", "--quiet"}).code, cli::ok);

  io::write_text_file(dir / "unknown.json", R"({"m": 10, "colour": 1})");
  auto r = run_cli({"sketch", "--config", dir / "unknown.json", "--out", dir / "x"});
  EXPECT_EQ(r.code, cli::config_error);
  EXPECT_NE(r.err.find("colour"), std::string::npos);
  io::write_text_file(dir / "broken.json", "{\"m\": ");
  EXPECT_EQ(run_cli({"sketch", "--config", dir / "broken.json"}).code, cli::config_error);
  EXPECT_EQ(run_cli({"no-such-command"}).code, cli::config_error);
  EXPECT_EQ(run_cli({}).code, cli::config_error);
  EXPECT_EQ(run_cli({"sketch", "--seed", "abc"}).code, cli::config_error);

  io::write_text_file(dir / "diverge.json",
                      R"({"synthetic": {"d": 4, "sparsity": 1, "n": 50},
                          "train": {"steps": 200, "learning_rate": 1e150, "lr_schedule": "constant"}})");
  r = run_cli({"train", "--config", dir / "diverge.json", "--out", dir / "t", "--quiet"});
  EXPECT_EQ(r.code, cli::numerical_error) << r.err;

  EXPECT_EQ(run_cli({"sketch", "--config", dir / "missing.json"}).code, cli::io_error);
  io::write_text_file(dir / "pca.json", R"({"factors_csv": "/nonexistent/f.csv"})");
  EXPECT_EQ(run_cli({"pca", "--config", dir / "pca.json", "--out", dir / "p"}).code, cli::io_error);
  io::write_text_file(dir / "file", "x");
  EXPECT_EQ(run_cli({"sketch", "--out", dir / "file/sub"}).code, cli::io_error);
}

TEST(Cli, DataToolsChainTogether) {
  TempDir dir;
  io::write_text_file(dir / "md.json", R"({"kind": "market", "periods": 120, "factors": 6, "assets": 3})");
  ASSERT_EQ(run_cli({"make-data", "--config", dir / "md.json", "--out", dir / "m"}).code, 0);
  io::write_text_file(dir / "pca.json", "{\"factors_csv\": \"" + dir / "m/factors.csv" + "\"}");
  ASSERT_EQ(run_cli({"pca", "--config", dir / "pca.json", "--out", dir / "p"}).code, 0);
  const json p = json::parse(io::read_text_file(dir / "p/report.json"));
  EXPECT_EQ(p["explained"].size(), 3u);
  io::write_text_file(dir / "ssa.json", "{\"factors_csv\": \"" + dir / "m/factors.csv" + "\", \"returns_csv\": \"" +
                                            dir / "m/returns.csv" + "\", \"window\": 40, \"stressed\": [\"F2\"]}");
  ASSERT_EQ(run_cli({"ssa", "--config", dir / "ssa.json", "--out", dir / "s"}).code, 0);
  const json s = json::parse(io::read_text_file(dir / "s/report.json"));
  EXPECT_EQ(s["real"]["periods"], 120 - 41);
  EXPECT_EQ(s["real"]["alignment"], "contemporaneous");

  io::write_text_file(dir / "img.json", R"({"kind": "strokes", "n": 4, "upscale_width": 56, "upscale_height": 56})");
  ASSERT_EQ(run_cli({"make-data", "--config", dir / "img.json", "--out", dir / "i"}).code, 0);
  EXPECT_EQ(io::load_idx_images(dir / "i/upscaled.idx").width, 56u);
}
