#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>

namespace {

namespace fs = std::filesystem;

const std::string kCli = ESC_CLI_PATH;
const fs::path kFixtures = ESC_FIXTURE_DIR;

struct RunResult {
  int code = -1;
  std::string out;  // stdout and stderr combined
};

fs::path tmp(const std::string& name) {
  return fs::temp_directory_path() / ("esc_cli_" + name);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

RunResult run(const std::string& args) {
  const fs::path log = tmp("log.txt");
  const std::string cmd = kCli + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  RunResult r;
  if (WIFEXITED(status)) r.code = WEXITSTATUS(status);
  r.out = slurp(log);
  return r;
}

}  // namespace

TEST_CASE("exit codes: 0 for help, 2 for usage errors, 1 for runtime failures") {
  CHECK(run("--help").code == 0);
  CHECK(run("infer --help").code == 0);

  CHECK(run("").code == 2);
  CHECK(run("frobnicate").code == 2);
  RunResult bad_flag = run("infer --bogus-flag 3");
  CHECK(bad_flag.code == 2);
  CHECK(bad_flag.out.find("--help") != std::string::npos);

  RunResult missing = run("metrics --sr no_such_a.ppm --hr no_such_b.ppm --scale 2");
  CHECK(missing.code == 1);
  CHECK(missing.out.find("error:") != std::string::npos);
}

TEST_CASE("metrics on identical images reports infinite psnr and unit ssim") {
  const std::string img = (kFixtures / "golden_out.ppm").string();
  RunResult r = run("metrics --sr " + img + " --hr " + img + " --scale 2");
  CHECK(r.code == 0);
  CHECK(r.out.find("PSNR: inf") != std::string::npos);
  CHECK(r.out.find("SSIM: 1.000000") != std::string::npos);
}

TEST_CASE("count reports the x2 reference target and deviation") {
  RunResult r = run("count --config esc --scale 2");
  CHECK(r.code == 0);
  CHECK(r.out.find("947000") != std::string::npos);
  CHECK(r.out.find("deviation") != std::string::npos);
}

TEST_CASE("verify exits zero with every check passing") {
  RunResult r = run("verify");
  CHECK(r.code == 0);
  CHECK(r.out.find("FAIL") == std::string::npos);
  CHECK(r.out.find("checks passed") != std::string::npos);
}

TEST_CASE("infer reproduces the committed golden output byte for byte") {
  const fs::path weights = tmp("golden.escw");
  const fs::path out1 = tmp("golden1.ppm");
  const fs::path out2 = tmp("golden2.ppm");
  const std::string cfg = (kFixtures / "golden.cfg").string();
  const std::string input = (kFixtures / "golden_in.ppm").string();

  RunResult init = run("init-random --config " + cfg + " --seed 1 --output " +
                       weights.string());
  CHECK(init.code == 0);

  const std::string base =
      "infer --config " + cfg + " --weights " + weights.string() + " --input " + input;
  CHECK(run(base + " --output " + out1.string()).code == 0);
  CHECK(run(base + " --output " + out2.string()).code == 0);

  const std::string golden = slurp(kFixtures / "golden_out.ppm");
  CHECK(slurp(out1) == golden);
  CHECK(slurp(out2) == golden);

  for (const fs::path& p : {weights, out1, out2}) fs::remove(p);
}
