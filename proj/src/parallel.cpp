#include "prmseg/parallel.hpp"

#include <atomic>
#include <condition_variable>
#include <mutex>
#include <thread>
#include <vector>

namespace prmseg {

namespace {

std::atomic<int> g_threads{0};  // 0 = not set yet, resolve lazily

int hardware_threads() {
  unsigned n = std::thread::hardware_concurrency();
  return n ? int(n) : 1;
}

// Persistent pool. Workers sleep between jobs; the calling thread executes
// the first partition itself so a pool of k workers serves k+1 partitions.
class Pool {
 public:
  explicit Pool(int workers) {
    for (int i = 0; i < workers; ++i) {
      threads_.emplace_back([this, i] { worker_loop(i + 1); });
    }
  }

  ~Pool() {
    {
      std::lock_guard<std::mutex> lk(mu_);
      stop_ = true;
    }
    cv_.notify_all();
    for (auto& t : threads_) t.join();
  }

  void run(int64_t n, int parts, const std::function<void(int64_t, int64_t)>& fn) {
    {
      std::lock_guard<std::mutex> lk(mu_);
      job_fn_ = &fn;
      job_n_ = n;
      job_parts_ = parts;
      pending_ = parts - 1;
      ++generation_;
    }
    cv_.notify_all();
    run_part(n, parts, 0, fn);
    std::unique_lock<std::mutex> lk(mu_);
    done_cv_.wait(lk, [this] { return pending_ == 0; });
    job_fn_ = nullptr;
  }

  int workers() const { return int(threads_.size()); }

 private:
  static void run_part(int64_t n, int parts, int p,
                       const std::function<void(int64_t, int64_t)>& fn) {
    const int64_t lo = n * p / parts;
    const int64_t hi = n * (p + 1) / parts;
    if (lo < hi) fn(lo, hi);
  }

  void worker_loop(int part_index) {
    uint64_t seen = 0;
    for (;;) {
      const std::function<void(int64_t, int64_t)>* fn = nullptr;
      int64_t n = 0;
      int parts = 0;
      {
        std::unique_lock<std::mutex> lk(mu_);
        cv_.wait(lk, [&] { return stop_ || generation_ != seen; });
        if (stop_) return;
        seen = generation_;
        fn = job_fn_;
        n = job_n_;
        parts = job_parts_;
      }
      if (fn && part_index < parts) run_part(n, parts, part_index, *fn);
      {
        std::lock_guard<std::mutex> lk(mu_);
        if (--pending_ == 0) done_cv_.notify_all();
      }
    }
  }

  std::mutex mu_;
  std::condition_variable cv_, done_cv_;
  std::vector<std::thread> threads_;
  const std::function<void(int64_t, int64_t)>* job_fn_ = nullptr;
  int64_t job_n_ = 0;
  int job_parts_ = 0;
  int pending_ = 0;
  uint64_t generation_ = 0;
  bool stop_ = false;
};

std::mutex g_pool_mu;
Pool* g_pool = nullptr;  // leaked on purpose; lives for the process

Pool* pool_for(int workers) {
  std::lock_guard<std::mutex> lk(g_pool_mu);
  if (!g_pool || g_pool->workers() != workers) {
    delete g_pool;
    g_pool = new Pool(workers);
  }
  return g_pool;
}

}  // namespace

void set_threads(int n) { g_threads.store(n < 1 ? 1 : n); }

int threads() {
  int n = g_threads.load();
  if (n == 0) {
    n = hardware_threads();
    g_threads.store(n);
  }
  return n;
}

namespace detail {

void parallel_run(int64_t n, const std::function<void(int64_t, int64_t)>& range_fn) {
  const int parts = threads();
  Pool* pool = pool_for(parts - 1);
  pool->run(n, parts, range_fn);
}

}  // namespace detail

}  // namespace prmseg
