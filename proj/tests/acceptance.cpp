// Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fails.

#include "flatlab/io.hpp"

#include <sys/wait.h>

#include <cstdio>
#include <iostream>

using namespace flatlab;

namespace {

constexpr std::uint64_t kSeed = 7;

struct CliRun {
	int code = -1;
	std::string out;
};

CliRun run_cli(const std::string& args)
{
	const std::string cmd = std::string(FLATLAB_CLI_PATH) + " " + args + " 2>/dev/null";
	CliRun r;
	FILE* pipe = popen(cmd.c_str(), "r");
	if (!pipe)
		return r;
	char buf[4096];
	std::size_t n;
	while ((n = fread(buf, 1, sizeof buf, pipe)) > 0)
		r.out.append(buf, n);
	const int status = pclose(pipe);
	r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
	return r;
}

std::string summarize(const SuiteResult& r)
{
	std::string s;
	for (const auto& c : r.checks) {
		if (!s.empty())
			s += "; ";
		s += c.name + " " + format_real(c.measured) + " vs " + format_real(c.threshold) + (c.passed ? "" : " [failed]");
	}
	return s;
}

bool report(int criterion, const std::string& title, bool passed, const std::string& detail)
{
	std::cout << (passed ? "PASS" : "FAIL") << " criterion " << criterion << ": " << title << " (" << detail << ")"
	          << std::endl;
	return passed;
}

} // namespace

int main()
{
	const std::vector<std::string> titles = {
	    "observational equivalence of scaling transforms",
	    "gradient and Hessian transformation laws",
	    "sharpening to a target spectral norm on (2,8,1)",
	    "many large Hessian eigenvalues on (3,4,4,1)",
	    "volume flatness certificate",
	    "eps-sharpness after the first-layer scaling",
	    "gradient norm slope against alpha",
	    "radial transformation",
	    "one-dimensional curvature congruence",
	};
	bool all = true;
	try {
		for (std::size_t i = 0; i < titles.size(); ++i) {
			const SuiteResult r = run_suite(suite_names()[i], kSeed);
			all &= report(static_cast<int>(i + 1), titles[i], r.passed(), summarize(r));
		}
	} catch (const std::exception& e) {
		std::cout << "FAIL criterion suites: " << e.what() << std::endl;
		return 1;
	}

	const CliRun first = run_cli("verify --suite all --seed 7");
	const CliRun second = run_cli("verify --suite all --seed 7");
	const CliRun parallel = run_cli("verify --suite all --seed 7 --jobs 8");
	const bool ran = first.code == 0 && second.code == 0 && parallel.code == 0 && !first.out.empty();
	const bool identical = first.out == second.out;
	const bool jobs_equal = first.out == parallel.out;
	all &= report(10, "determinism of verify --suite all --seed 7", ran && identical && jobs_equal,
	              "exit codes " + std::to_string(first.code) + "," + std::to_string(second.code) + "," +
	                  std::to_string(parallel.code) + "; repeat " + (identical ? "identical" : "differs") +
	                  "; jobs 1 vs 8 " + (jobs_equal ? "identical" : "differs"));
	return all ? 0 : 1;
}
