#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include <csignal>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>
#include <unistd.h>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Result {
  int code = -1;
  std::string output;
};

/// Runs the CLI with stdout and stderr captured.
Result run(const std::string& args) {
  const std::string cmd = std::string(MPT_CLI) + " " + args + " 2>&1";
  Result r;
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  char buf[512];
  while (fgets(buf, sizeof buf, pipe)) r.output += buf;
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

json read_json(const fs::path& p) {
  std::ifstream in(p);
  return json::parse(in);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

/// Concatenated parameter files of a checkpoint, in name order.
std::string checkpoint_bytes(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.path().extension() == ".bin") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::string all;
  for (const auto& f : files) all += slurp(f);
  return all;
}

const std::string kSmall =
    "--dim 16 --heads 2 --enc-layers 1 --dec-blocks 1 --window-len 64 --tctx 64 --hop 16 --windows 4 "
    "--np 2 --nr 2 --density 0.1 --batch-size 4 --lr 1e-3 --max-epochs 2";

struct Workdir {
  fs::path root;
  Workdir() {
    root = fs::temp_directory_path() / ("mpt_cli_" + std::to_string(::getpid()));
    fs::remove_all(root);
    fs::create_directories(root);
  }
  ~Workdir() { fs::remove_all(root); }
  std::string operator/(const std::string& name) const { return (root / name).string(); }
};

}  // namespace

TEST_CASE("help, version and argument errors") {
  CHECK(run("--help").code == 0);
  CHECK(run("train --help").code == 0);
  CHECK(run("--version").output.find("0.1.0") != std::string::npos);
  CHECK(run("").code != 0);
  CHECK(run("frobnicate").code != 0);
  CHECK(run("gen-data --out /tmp/x --no-such-flag 3").code != 0);
  CHECK(run("eval --protocol sideways --checkpoint /tmp --data /tmp").code != 0);
  CHECK(run("serve --checkpoint /nonexistent/checkpoint --port 0").code != 0);
  for (const char* sub : {"gen-data", "eval", "sweep", "serve"}) CHECK(run(std::string(sub) + " --help").code == 0);
}

TEST_CASE("gen-data writes a loadable dataset and rejects one state") {
  Workdir w;
  const Result ok = run("gen-data --out " + (w / "d") + " --series 2 --len 1200 --states 4 --coarsen 2");
  REQUIRE(ok.code == 0);
  CHECK(fs::exists(w / "d/meta.json"));
  CHECK(read_json(w / "d/manifest.json").at("command") == "gen-data");
  CHECK(ok.output.find("K=6") != std::string::npos);
  const json man = read_json(w / "d/manifest.json");
  CHECK(man.at("seed") == 0);
  CHECK(man.at("outputs").size() == 3);
  CHECK(man.contains("finished"));

  // Same seed, same files.
  REQUIRE(run("gen-data --out " + (w / "d2") + " --series 2 --len 1200 --states 4 --coarsen 2").code == 0);
  for (const char* f : {"meta.json", "series_0.csv", "series_1.csv"})
    CHECK_MESSAGE(slurp(w.root / "d" / f) == slurp(w.root / "d2" / f), f);

  const Result bad = run("gen-data --out " + (w / "d1") + " --states 1");
  CHECK(bad.code == 1);
  CHECK(bad.output.find("at least 2 states") != std::string::npos);
}

TEST_CASE("train writes a complete run directory and reruns bit-identically from its manifest") {
  Workdir w;
  REQUIRE(run("gen-data --out " + (w / "d") + " --series 3 --len 3000 --states 4 --coarsen 2 --seed 1").code == 0);
  const Result t1 = run("train --data " + (w / "d") + " " + kSmall + " --run-dir " + (w / "r1"));
  REQUIRE_MESSAGE(t1.code == 0, t1.output);
  for (const char* f : {"manifest.json", "history.jsonl", "report.json", "checkpoint/manifest.json",
                        "checkpoint/train_config.json"})
    CHECK_MESSAGE(fs::exists(w.root / "r1" / f), f);

  std::ifstream history(w / "r1/history.jsonl");
  int lines = 0;
  for (std::string line; std::getline(history, line);) {
    CHECK(json::parse(line).at("epoch") == lines + 1);
    ++lines;
  }
  CHECK(lines == 2);

  const json man = read_json(w / "r1/manifest.json");
  CHECK(man.at("config").at("model").at("D") == 16);
  CHECK(man.at("config").at("model").at("K_total") == 6);
  CHECK(man.at("config").at("train").at("W") == 4);
  CHECK(man.contains("finished"));
  CHECK(man.at("seed") == 0);
  CHECK(man.at("outputs").size() == 3);

  // The manifest's resolved config reproduces the run exactly.
  REQUIRE(run("train --data " + (w / "d") + " --config " + (w / "r1/manifest.json") + " --run-dir " + (w / "r2")).code == 0);
  CHECK(slurp(w / "r1/report.json") == slurp(w / "r2/report.json"));
  CHECK(slurp(w / "r1/history.jsonl") == slurp(w / "r2/history.jsonl"));
  CHECK(checkpoint_bytes(w.root / "r1/checkpoint") == checkpoint_bytes(w.root / "r2/checkpoint"));

  // Explicit flags override the config file.
  REQUIRE(run("train --data " + (w / "d") + " --config " + (w / "r1/manifest.json") +
              " --max-epochs 1 --seed 5 --run-dir " + (w / "r3"))
              .code == 0);
  const json man3 = read_json(w / "r3/manifest.json");
  CHECK(man3.at("config").at("train").at("max_epochs") == 1);
  CHECK(man3.at("config").at("train").at("seed") == 5);
  CHECK(man3.at("config").at("model").at("D") == 16);

  SUBCASE("eval protocols") {
    const std::string base = "eval --checkpoint " + (w / "r1/checkpoint") + " --data " + (w / "d");
    const Result single = run(base + " --density 0.1 --run-dir " + (w / "e1"));
    REQUIRE_MESSAGE(single.code == 0, single.output);
    const json r1 = read_json(w / "e1/report.json");
    CHECK(r1.at("protocol") == "single");
    CHECK(r1.at("prompts_per_subsequence") == 11);

    const Result iter = run(base + " --protocol iterative --np 2 --nr 3 --run-dir " + (w / "e2"));
    REQUIRE(iter.code == 0);
    const json r2 = read_json(w / "e2/report.json");
    CHECK(r2.at("curve").size() == 3);
    CHECK(r2.at("deltas_pp").at(0) == 0.0);

    // Density is a free parameter.
    const Result dense = run(base + " --density 0.5 --run-dir " + (w / "e4"));
    REQUIRE_MESSAGE(dense.code == 0, dense.output);
    CHECK(read_json(w / "e4/report.json").at("prompts_per_subsequence") == 56);

    // Same seed, same report.
    REQUIRE(run(base + " --density 0.1 --run-dir " + (w / "e3")).code == 0);
    CHECK(slurp(w / "e1/report.json") == slurp(w / "e3/report.json"));
  }

  SUBCASE("eval rejects incompatible data") {
    REQUIRE(run("gen-data --out " + (w / "d5") + " --series 2 --len 3000 --states 5").code == 0);
    const Result k = run("eval --checkpoint " + (w / "r1/checkpoint") + " --data " + (w / "d5"));
    CHECK(k.code == 1);
    CHECK(k.output.find("K=5") != std::string::npos);
    REQUIRE(run("gen-data --out " + (w / "d6") + " --series 2 --len 3000 --states 4 --coarsen 2 --channels 2").code == 0);
    const Result c = run("eval --checkpoint " + (w / "r1/checkpoint") + " --data " + (w / "d6"));
    CHECK(c.code == 1);
    CHECK(c.output.find("C=2") != std::string::npos);
  }

  SUBCASE("sweep") {
    const std::string base = "sweep --data " + (w / "d") + " --config " + (w / "r1/manifest.json") + " --max-epochs 1";
    CHECK(run(base + " --grid windows=").code == 1);
    CHECK(run(base + " --grid depth=1,2").code == 1);
    CHECK(run(base + " --grid tctx=half").code == 1);

    const Result tctx = run(base + " --grid tctx=0.5T,1T,2T --run-dir " + (w / "s1"));
    REQUIRE_MESSAGE(tctx.code == 0, tctx.output);
    const json rows = read_json(w / "s1/report.json").at("rows");
    REQUIRE(rows.size() == 3);
    CHECK(rows[0].at("T_ctx") == 32);
    CHECK(rows[2].at("T_ctx") == 128);
    for (const auto& row : rows) {
      CHECK(row.at("acc").get<double>() >= 0);
      CHECK(row.at("train_seconds").get<double>() > 0);
      CHECK(row.at("seconds_per_batch").get<double>() > 0);
    }

    // Two windows leave a budget of 8 prompts: N_r shrinks from 2 only when needed.
    const Result win = run(base + " --grid windows=2,4 --run-dir " + (w / "s2"));
    REQUIRE_MESSAGE(win.code == 0, win.output);
    const json wrows = read_json(w / "s2/report.json").at("rows");
    REQUIRE(wrows.size() == 2);
    CHECK(wrows[0].at("W") == 2);
    CHECK(wrows[0].at("N_r") == 2);
  }

  SUBCASE("timestamped run directories under --out-root") {
    REQUIRE(run("eval --checkpoint " + (w / "r1/checkpoint") + " --data " + (w / "d") + " --out-root " + (w / "runs")).code == 0);
    int count = 0;
    for (const auto& e : fs::directory_iterator(w.root / "runs")) {
      CHECK(e.path().filename().string().ends_with("-eval"));
      CHECK(fs::exists(e.path() / "manifest.json"));
      ++count;
    }
    CHECK(count == 1);
  }

  SUBCASE("serve on an ephemeral port") {
    int out[2];
    REQUIRE(::pipe(out) == 0);
    const std::string ckpt = w / "r1/checkpoint";
    const std::string data = w / "d";
    const pid_t pid = ::fork();
    REQUIRE(pid >= 0);
    if (pid == 0) {
      ::dup2(out[1], STDOUT_FILENO);
      ::close(out[0]);
      ::execl(MPT_CLI, MPT_CLI, "serve", "--checkpoint", ckpt.c_str(), "--data", data.c_str(), "--port", "0",
              static_cast<char*>(nullptr));
      ::_exit(127);
    }
    ::close(out[1]);
    std::string line;
    char c = 0;
    while (::read(out[0], &c, 1) == 1 && c != '\n') line += c;
    ::close(out[0]);
    REQUIRE(line.rfind("listening on http://127.0.0.1:", 0) == 0);
    const int port = std::stoi(line.substr(line.rfind(':') + 1));
    CHECK(port > 0);

    httplib::Client client("127.0.0.1", port);
    auto health = client.Get("/healthz");
    REQUIRE(health);
    CHECK(health->status == 200);
    auto created = client.Post("/sessions", R"({"dataset_index":0,"level":1})", "application/json");
    REQUIRE(created);
    CHECK(created->status == 201);
    CHECK(json::parse(created->body).at("K") == 6);

    ::kill(pid, SIGTERM);
    int status = 0;
    ::waitpid(pid, &status, 0);
    CHECK(WIFEXITED(status));
    CHECK(WEXITSTATUS(status) == 0);
  }
}
