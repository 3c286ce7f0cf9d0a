/* SPDX-License-Identifier: Apache-2.0 */
#include <stdio.h>
#include <string.h>

#include "sbpf.h"

#define CHECK(cond)                                                  \
  do {                                                               \
    if (!(cond)) {                                                   \
      char msg[256];                                                 \
      sbpf_last_error(msg, sizeof msg);                              \
      fprintf(stderr, "%s:%d: %s (%s)\n", __FILE__, __LINE__, #cond, msg); \
      return 1;                                                      \
    }                                                                \
  } while (0)

int main(void) {
  /* mov64 r0, r1; add64 r0, 0x10; exit */
  const uint8_t code[] = {
      0xbf, 0x10, 0, 0, 0, 0, 0, 0,
      0x07, 0x00, 0, 0, 0x10, 0, 0, 0,
      0x95, 0x00, 0, 0, 0, 0, 0, 0,
  };
  SbpfProgram *prog = NULL;
  CHECK(sbpf_program_load(code, sizeof code, &prog) == SBPF_STATUS_OK);
  CHECK(sbpf_program_len(prog) == 3);

  SbpfVm *vm = sbpf_vm_new();
  uint64_t args[5] = {0x20, 0, 0, 0, 0};
  uint64_t r0 = 0;
  CHECK(sbpf_vm_execute(vm, prog, args, &r0) == SBPF_STATUS_OK);
  CHECK(r0 == 0x30);

  uint8_t key[32];
  memset(key, 0x5a, sizeof key);
  size_t need = 0;
  CHECK(sbpf_library_sign(key, code, sizeof code, NULL, 0, &need) == SBPF_STATUS_BUFFER_TOO_SMALL);
  uint8_t signed_buf[128];
  CHECK(need <= sizeof signed_buf);
  CHECK(sbpf_library_sign(key, code, sizeof code, signed_buf, sizeof signed_buf, &need) == SBPF_STATUS_OK);
  CHECK(sbpf_library_verify(key, signed_buf, need) == SBPF_STATUS_OK);
  signed_buf[need - 1] ^= 0x80;
  CHECK(sbpf_library_verify(key, signed_buf, need) == SBPF_STATUS_INTEGRITY_FAILED);

  const uint8_t bad[] = {0x95, 0, 0, 0, 0, 0, 0, 0};
  SbpfProgram *rejected = NULL;
  CHECK(sbpf_program_load(bad, sizeof bad, &rejected) == SBPF_STATUS_VERIFICATION_FAILED);
  CHECK(rejected == NULL);

  SbpfPss *model = sbpf_pss_new(48);
  uint64_t f[3] = {1, 2, 3};
  bool before = false;
  CHECK(sbpf_pss_update(model, f, true, &before) == SBPF_STATUS_OK);
  bool decision = false;
  CHECK(sbpf_pss_predict(model, f, &decision, NULL) == SBPF_STATUS_OK);
  CHECK(decision);

  sbpf_pss_free(model);
  sbpf_vm_free(vm);
  sbpf_program_free(prog);
  printf("c smoke ok\n");
  return 0;
}
