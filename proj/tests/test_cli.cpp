#include <gtest/gtest.h>

#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "nvs/io.hpp"
#include "nvs/service.hpp"

namespace fs = std::filesystem;

namespace {

struct CliRun {
  int code = -1;
  std::string out, err;
};

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

class Cli : public ::testing::Test {
 protected:
  static fs::path dir() { return fs::temp_directory_path() / "nvs_test_cli"; }

  static void SetUpTestSuite() {
    fs::remove_all(dir());
    fs::create_directories(dir());
    std::ofstream(dir() / "tiny.cfg") << "# small model for fast runs\n"
                                         "n = 16\nimage_size = 16\nencoder_channels = 8,8\ndecoder_channels = 8,8\n"
                                         "scene_count = 4\nvalidation_scenes = 2\nvalidation_pairs = 4\n"
                                         "pairs_per_epoch = 8\nbatch_size = 4\nepochs = 2\n";
    const auto r = run("train --config tiny.cfg --out model");
    ASSERT_EQ(r.code, 0) << r.err;
  }
  static void TearDownTestSuite() { fs::remove_all(dir()); }

  static CliRun run(const std::string& args) {
    const auto out = dir() / "stdout.txt", err = dir() / "stderr.txt";
    const std::string cmd = "cd '" + dir().string() + "' && '" NVS_CLI_PATH "' " + args + " > '" + out.string() + "' 2> '" +
                            err.string() + "'";
    const int status = std::system(cmd.c_str());
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(out), slurp(err)};
  }

  static nlohmann::json error_line(const CliRun& r) {
    EXPECT_NE(r.code, 0);
    EXPECT_EQ(std::count(r.err.begin(), r.err.end(), '\n'), 1) << r.err;
    return nlohmann::json::parse(r.err);
  }

  static std::string ckpt() { return "--checkpoint model/model.nvsc"; }
};

}  // namespace

TEST_F(Cli, HelpDocumentsSubcommandsAndFlags) {
  const auto top = run("--help");
  EXPECT_EQ(top.code, 0);
  for (const char* sub : {"train", "eval", "sweep", "render", "orbit", "serve", "gradcheck", "interpolate", "gen-data"}) {
    EXPECT_NE(top.out.find(sub), std::string::npos) << sub;
    const auto h = run(std::string(sub) + " --help");
    EXPECT_EQ(h.code, 0) << sub;
    for (const char* flag : {"--config", "--checkpoint", "--seed"}) EXPECT_NE(h.out.find(flag), std::string::npos) << sub << " " << flag;
  }
  EXPECT_NE(run("sweep --help").out.find("--range"), std::string::npos);
  EXPECT_NE(run("orbit --help").out.find("--overlay"), std::string::npos);
}

TEST_F(Cli, ErrorsAreOneMachineParsableLineNamingTheToken) {
  auto j = error_line(run("sweep --bogus 3"));
  EXPECT_EQ(j["error"], "unknown_flag");
  EXPECT_EQ(j["token"], "--bogus");

  j = error_line(run("eval --checkpoint missing.nvsc"));
  EXPECT_EQ(j["error"], "missing_file");
  EXPECT_EQ(j["token"], "missing.nvsc");

  std::ofstream(dir() / "bad.cfg") << "epochs = 2\nlearning_rate = 3\n";
  j = error_line(run("train --config bad.cfg --out x"));
  EXPECT_EQ(j["error"], "config");
  EXPECT_EQ(j["token"], "learning_rate");

  j = error_line(run("orbit --oracle --views many --overlay o.png"));
  EXPECT_EQ(j["token"], "--views");

  j = error_line(run("frobnicate"));
  EXPECT_EQ(j["token"], "frobnicate");

  std::ofstream(dir() / "bad_poses.txt") << "1 0 0 0 0 1 0 0 0 0 1\n";
  j = error_line(run("render --oracle --poses bad_poses.txt --out r"));
  EXPECT_EQ(j["token"], "bad_poses.txt");
  EXPECT_FALSE(fs::exists(dir() / "r"));  // nothing written on failure
}

TEST_F(Cli, GradcheckReportsEveryOp) {
  const auto r = run("gradcheck");
  EXPECT_EQ(r.code, 0) << r.out << r.err;
  for (const char* op : {"conv2d.weight", "transposed_conv2d.input", "bilinear_sample.image", "bilinear_sample.flow",
                         "depth_to_flow_diff", "transform_latent", "end_to_end_loss"}) {
    EXPECT_NE(r.out.find(op), std::string::npos) << op;
  }
  EXPECT_EQ(r.out.find("FAIL"), std::string::npos);
}

TEST_F(Cli, SweepWritesOneRowPerDegree) {
  const auto r = run("sweep " + ckpt() + " --range 40 --step 1 --scenes 1 --out sweep.csv");
  ASSERT_EQ(r.code, 0) << r.err;
  std::istringstream csv(slurp(dir() / "sweep.csv"));
  std::string line;
  std::getline(csv, line);
  EXPECT_EQ(line, "angle,l1,ssim");
  int rows = 0;
  while (std::getline(csv, line)) ++rows;
  EXPECT_EQ(rows, 81);
  EXPECT_NE(r.err.find("snapping_ratio"), std::string::npos);
}

TEST_F(Cli, OrbitOverlayIsByteIdenticalAcrossRuns) {
  ASSERT_EQ(run("orbit " + ckpt() + " --views 80 --step 1 --overlay a/out.png --frames a/frames").code, 0);
  ASSERT_EQ(run("orbit " + ckpt() + " --views 80 --step 1 --overlay b/out.png").code, 0);
  EXPECT_EQ(slurp(dir() / "a/out.png"), slurp(dir() / "b/out.png"));
  EXPECT_EQ(std::distance(fs::directory_iterator(dir() / "a/frames"), fs::directory_iterator()), 80);
  const auto img = nvs::io::read_png(dir() / "a/out.png");
  EXPECT_EQ(img.width, 16);
  ASSERT_EQ(run("orbit --oracle --size 32 --views 80 --step 1 --overlay c/out.png").code, 0);
  EXPECT_EQ(nvs::io::read_png(dir() / "c/out.png").width, 32);
}

TEST_F(Cli, TrainingIsByteIdenticalAcrossRuns) {
  ASSERT_EQ(run("train --config tiny.cfg --seed 5 --out t1").code, 0);
  ASSERT_EQ(run("train --config tiny.cfg --seed 5 --out t2").code, 0);
  for (const char* f : {"metrics.csv", "model.nvsc", "model.nvsc.cfg"}) EXPECT_EQ(slurp(dir() / "t1" / f), slurp(dir() / "t2" / f)) << f;
  ASSERT_EQ(run("eval " + ckpt() + " --config tiny.cfg --out e1.csv").code, 0);
  ASSERT_EQ(run("eval " + ckpt() + " --config tiny.cfg --out e2.csv").code, 0);
  EXPECT_EQ(slurp(dir() / "e1.csv"), slurp(dir() / "e2.csv"));
  EXPECT_EQ(slurp(dir() / "e1.csv").substr(0, 16), "metric,value\nl1,");
}

TEST_F(Cli, GenDataRenderAndInterpolate) {
  ASSERT_EQ(run("gen-data --out data --scenes 2 --size 16 --seed 9").code, 0);
  const fs::path scene = dir() / "data/scene_000000";
  ASSERT_TRUE(fs::exists(scene / "poses.txt"));
  ASSERT_TRUE(fs::exists(scene / "intrinsics.txt"));
  EXPECT_TRUE(fs::exists(scene / "000071.pfm"));
  EXPECT_EQ(nvs::io::read_poses(scene / "poses.txt").size(), 72u);

  // A recorded relative-pose track, as the viewer exports it.
  std::vector<nvs::RigidTransform> track;
  for (int i = 0; i < 5; ++i) track.push_back({nvs::rot_y(0.05 * i), nvs::Vec3(0.02 * i, 0, 0)});
  nvs::io::write_poses(dir() / "track.txt", track);
  ASSERT_EQ(run("render " + ckpt() + " --poses track.txt --out r1 --depth").code, 0);
  ASSERT_EQ(run("render " + ckpt() + " --poses track.txt --out r2 --depth").code, 0);
  for (const char* f : {"000000.png", "000004.png", "000004_depth.png"}) EXPECT_EQ(slurp(dir() / "r1" / f), slurp(dir() / "r2" / f)) << f;

  ASSERT_EQ(run("interpolate " + ckpt() + " --steps 5 --out interp").code, 0);
  EXPECT_EQ(std::distance(fs::directory_iterator(dir() / "interp"), fs::directory_iterator()), 5);
}

TEST_F(Cli, ServeHonoursBindEnvironmentAndShutsDownOnSignal) {
  int pipefd[2];
  ASSERT_EQ(pipe(pipefd), 0);
  const pid_t pid = fork();
  ASSERT_GE(pid, 0);
  if (pid == 0) {
    dup2(pipefd[1], STDOUT_FILENO);
    close(pipefd[0]);
    setenv("NVS_BIND", "127.0.0.1:0", 1);
    execl(NVS_CLI_PATH, NVS_CLI_PATH, "serve", static_cast<char*>(nullptr));
    _exit(127);
  }
  close(pipefd[1]);
  std::string line;
  char c;
  while (read(pipefd[0], &c, 1) == 1 && c != '\n') line += c;
  close(pipefd[0]);
  ASSERT_EQ(line.rfind("listening 127.0.0.1:", 0), 0u) << line;
  const auto port = std::uint16_t(std::stoi(line.substr(line.rfind(':') + 1)));

  namespace beast = boost::beast;
  namespace http = beast::http;
  boost::asio::io_context ioc;
  beast::tcp_stream stream(ioc);
  stream.connect({boost::asio::ip::make_address("127.0.0.1"), port});
  http::request<http::string_body> req{http::verb::get, "/health", 11};
  req.set(http::field::host, "127.0.0.1");
  http::write(stream, req);
  beast::flat_buffer buf;
  http::response<http::string_body> res;
  http::read(stream, buf, res);
  EXPECT_EQ(res.result_int(), 200u);
  stream.close();

  kill(pid, SIGTERM);
  int status = 0;
  waitpid(pid, &status, 0);
  EXPECT_TRUE(WIFEXITED(status));
  EXPECT_EQ(WEXITSTATUS(status), 0);
}
